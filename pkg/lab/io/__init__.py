"""
Tensor container, CSV tables, SVG plots and external representation ingestion
"""
