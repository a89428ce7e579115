"""Core modules for EnsembleGP: random-feature GP experts, ensembles and the experiment harness."""
