"""Translation quality estimation from (source, MT) pairs alone.

Pipeline: pretrain a bidirectional conditional language model on parallel
text, extract per-token model and mismatch features for machine
translations, then train a Bi-LSTM to predict sentence HTER and word/gap
OK-BAD tags.
"""

__version__ = "0.1.0"
