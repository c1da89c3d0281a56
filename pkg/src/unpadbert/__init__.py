"""Unpadded BERT training mechanisms at desk scale."""
