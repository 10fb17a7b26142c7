"""
Base exception for the EP-ABC engine.

Each module defines its own subclasses next to the code that raises them.
"""


class EPABCError(Exception):
    """Base exception for all engine errors."""

    code: str = "EPABC_ERROR"
