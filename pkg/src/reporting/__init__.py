"""
Reporting Module
"""

from .report_generator import ReportGenerator, load_metrics, summarize_sweep

__all__ = ['ReportGenerator', 'load_metrics', 'summarize_sweep']
