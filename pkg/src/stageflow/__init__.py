"""Task-stage cue injection for a flow-matching manipulation policy, plus a
deterministic false-completion benchmark world."""

__version__ = "0.1.0"
