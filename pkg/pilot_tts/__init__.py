"""
pilot_tts: desk-scale zero-shot text-to-speech.

Curation, an FSQ speech tokenizer, a conditioned autoregressive token model
and a flow-matching mel decoder, all on a small numpy autograd.
"""

__version__ = '0.1.0'
