"""
crimemap

Map crime-rate levels of a city from public crime reports and overhead
imagery, and predict them for cities without reports.
"""

__version__ = "0.1.0"
