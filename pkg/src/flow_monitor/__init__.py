"""Flow Monitor - process-mining monitor for RBC/RBC handover control flow."""

__version__ = "0.1.0"
