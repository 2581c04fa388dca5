"""Desk-scale cross-modal teacher-student learning for end-to-end spoken
language understanding: a joint CTC/attention speech recognizer, a masked-LM
sentence-embedding text model, a bridged student distilled toward the frozen
teacher, and the evaluation protocol comparing it against the
recognize-then-understand pipeline."""

__version__ = "0.1.0"
