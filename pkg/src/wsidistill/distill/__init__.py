"""Training mathematics: losses, schedules, train step and checkpoints."""
