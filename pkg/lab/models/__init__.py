"""
Pydantic models for configuration and run reports
"""
