"""Lifelong text-classification engine with episodic replay and
embedding consolidation.

The package is organised as a small stack: ``numeric`` holds the tensor
primitives and gradient machinery, ``stream`` the corpus and task-stream
handling, ``model`` the dual-channel encoder, ``continual`` the replay and
consolidation trainer, ``baselines`` the reference strategies, ``evaluation``
the experiment harness, and ``cli`` the command-line entry point.
"""

__version__ = "0.1.0"
