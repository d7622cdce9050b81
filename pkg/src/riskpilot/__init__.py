"""Risk-based test selection and commit-level defect prevention engine.

Two production workflows behind one library: scoring and ranking test cases
by risk exposure with budgeted selection and stale-test retirement, and
labeling/learning/explaining bug-inducing commits. ``riskpilot.pipeline``
orchestrates both from config files; ``riskpilot.cli`` and
``riskpilot.service`` expose them as a command line and an HTTP API.
"""

__version__ = "0.1.0"
