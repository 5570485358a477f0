"""Cross-lingual pseudo-labeling for CTC speech recognition, at desk scale.

Modules: ``textnorm`` (token sets and normalization), ``lm`` (Kneser-Ney
n-grams, ARPA I/O), ``ctc`` (loss and greedy decoding), ``am`` (acoustic
model and training), ``decoder`` (lexicon beam search with LM fusion),
``metrics`` (WER/CER), ``pl`` (pseudo-labeling phases), ``synthdata``
(synthetic languages and benchmarks) and ``cli``.
"""

__version__ = "0.1.0"
