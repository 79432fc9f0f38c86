"""
ssmlab: unified state-space recurrences, their parameterizations, and the
recency / over-smoothing diagnostics built on them.
"""
__version__ = '0.3.0'
