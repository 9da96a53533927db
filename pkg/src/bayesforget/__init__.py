"""Bayesian inference forgetting: remove training datums from VI and SG-MCMC posteriors."""
