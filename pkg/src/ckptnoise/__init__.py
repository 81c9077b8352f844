"""Matrix-wise noise perturbation of pretrained checkpoints before finetuning."""

__version__ = "0.1.0"
