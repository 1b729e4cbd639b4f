"""Variable-context transformer transducer kit: training, streaming inference and evaluation."""
