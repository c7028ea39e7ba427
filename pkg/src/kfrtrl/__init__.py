"""Forward-mode online learning for recurrent networks.

Exact RTRL, its Kronecker-factored and rank-one unbiased approximations,
a truncated-BPTT baseline, online training loops, task generators and a
statistical harness that verifies unbiasedness and variance scaling
against the exact oracle.
"""

__version__ = "0.1.0"
