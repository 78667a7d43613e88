"""VIS masked-autoencoder pretraining with multitask knowledge distillation."""
__version__ = "0.1.0"
