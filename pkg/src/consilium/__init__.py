"""Consilium: multi-agent deliberation with experience distillation and reuse.

The engine runs bounded multi-round consultations over task records, scores
each utterance, assigns group-to-agent credit, distills high-reward
utterances into a retrievable experience pool, and re-injects retrieved
experiences into later runs. All model traffic flows through replayable
backends so every pipeline is reproducible bit-for-bit.
"""

__version__ = "0.1.0"
