"""Multimodal masked-autoencoder pretraining biased toward a target modality,
with synthetic modulation data, fine-tuning, and SNR-sweep evaluation."""

__version__ = "0.1.0"
