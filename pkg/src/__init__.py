"""Budget-constrained ensemble federated learning with feedback graphs."""
