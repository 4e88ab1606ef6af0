"""
Cross-cutting configuration, logging and error handling
"""
