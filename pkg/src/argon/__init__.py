"""Attribute-regularized melody autoencoder workbench.

Subpackages cover the full experiment chain: corpus construction
(``melody_core``, ``smf_ingest``), musical attribute extraction
(``attributes``), attribute Gaussianization (``gaussianize``), the numerical
substrate (``autograd_nn``), the regularized model and training loop
(``vib``), latent-space evaluation (``latent_metrics``) and the batch CLI
(``cli``).
"""

__version__ = "0.1.0"
