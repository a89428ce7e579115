"""Data sources and sinks for EnsembleGP: synthetic streams, CSV ingestion, checkpoints and reports."""
