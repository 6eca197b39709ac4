"""Instantaneous Sharpe-ratio pricing and mean-variance hedging in regime-switching markets."""
