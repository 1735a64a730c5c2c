"""Sequencer-style BiLSTM2D tile classifier for H&E biomarker prediction, on a numpy autodiff core."""

__version__ = "0.1.0"
