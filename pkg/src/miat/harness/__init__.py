"""Run plumbing: configs, synthetic data, task models, training, checkpoints and the CLI."""
