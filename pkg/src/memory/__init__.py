"""
Memory Bank Module
"""

from .memory_bank import ClassMemoryBank, BankEntry, EmbeddingDimensionError

__all__ = ['ClassMemoryBank', 'BankEntry', 'EmbeddingDimensionError']
