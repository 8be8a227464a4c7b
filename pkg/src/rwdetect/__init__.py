"""Behavioural ransomware detection over sandbox reports.

Parses Cuckoo-compatible JSON reports into sparse binary feature matrices,
selects features in two stages (mutual-information filtering, then
recursive feature elimination), trains classifiers under a time-aware
split, and explains verdicts with exact linear SHAP and LIME.
"""

__version__ = "0.1.0"

from .errors import PipelineError  # noqa: F401
