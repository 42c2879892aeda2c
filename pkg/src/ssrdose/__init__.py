"""Two-stage adaptive dose-finding designs with unblinded sample size re-estimation."""
