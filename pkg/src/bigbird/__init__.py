"""BigBird sparse attention: patterns, dense oracle, blocked path, encoder,
graph diagnostics and executable universal-approximation constructions."""

__version__ = "0.1.0"
