"""Knowledge-taxonomy engineering toolkit for medical entity trees."""

__version__ = "0.1.0"

from .taxonomy import AuditRecord, EntityNode, TaxonomyTree

__all__ = ["AuditRecord", "EntityNode", "TaxonomyTree", "__version__"]
