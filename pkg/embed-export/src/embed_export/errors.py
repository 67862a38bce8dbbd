"""Exception type for the exporter."""


class ExportError(Exception):
    """Dataset layout, encoder availability, or payload problem during export."""
