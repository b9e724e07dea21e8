"""
cellcompare
Source package initialization
"""

__version__ = "1.0.0"
__author__ = "cellcompare"
__description__ = "RoI ve sınıf düzeyinde örnek karşılaştırmalı dengesiz hücre tespiti"
