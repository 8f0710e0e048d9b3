"""Training, evaluation, metrics, reports and the command line."""
