"""Region captioning on synthetic scenes.

A frozen image encoder and a frozen causal language model are bridged by a
trainable stacked query-based feature mixer; training runs weak-supervision
pretraining on class labels followed by caption finetuning, and evaluation
uses referring-based caption metrics plus noun/verb phrase coverage.
"""

__version__ = "0.1.0"
