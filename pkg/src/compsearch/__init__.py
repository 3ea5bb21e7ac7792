"""Compositional visual search with composition-aware embeddings.

A canvas of category-labelled boxes is the query; images are ranked by
dot-product similarity in a learned embedding space whose geometry tracks
the continuous overlap between scene compositions.
"""

__version__ = "0.1.0"
