"""Test-time policy evolution for stack-DSL program synthesis"""

__version__ = "0.1.0"
