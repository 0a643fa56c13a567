"""Joint active alignment of entities, relations and classes across two KGs."""

__version__ = "0.1.0"
