"""Cross-modal masked-autoencoder pretraining for paired ECG-PPG signals.

Subpackages: signal conditioning (sigproc), synthetic paired-signal
generation (synthgen), mask construction and curriculum (masking), the
network and checkpoints (model, nn), optimization (training),
physiological evaluation (evalkit), the exact-enumeration delay oracle
(oracle), report rendering (report), and the operator CLI (cli).
"""

__version__ = "0.1.0"
