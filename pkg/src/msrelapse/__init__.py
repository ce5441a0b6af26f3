"""Weekly relapse prediction from environmental exposure and clinical history."""

__version__ = "0.1.0"
