"""
riskdrive: risk-aware decision making for automated highway driving

This package contains a microscopic highway simulator, a weight-aware
driving risk field, a hybrid-action decision environment, a small numpy
autograd with the recurrent and attention layers the policy needs, an HPPO
trainer, and surrogate safety metrics for simulated or recorded
trajectories.
"""
