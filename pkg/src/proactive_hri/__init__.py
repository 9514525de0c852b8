"""Proactive human-robot interaction decision stack.

Object-level visual tokens feed a frame-causal transformer that decides
whether to initiate an interaction, whom to address, and which
multi-modal action (utterance, expression, motion) to perform.
"""

__version__ = "0.1.0"
