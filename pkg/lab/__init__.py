"""
ICL geometry lab: toy transformer, task generators, geometry measurements and probes
"""

__version__ = "1.0.0"
