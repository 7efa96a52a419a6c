"""Knowledge-graph construction toolkit.

An LLM-backed hierarchical extractor and a rotational-embedding structural
validator refine each other iteratively, turning unstructured documents into
schema-valid, structurally plausible triples.
"""

__version__ = "0.1.0"
