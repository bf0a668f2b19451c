"""rectiflow: a desk-scale rectified-flow image generator.

Subpackages:
  numerics    - tensors, autodiff, seeded RNG
  lesiondata  - procedural lesion dataset with structured captions
  flowmodel   - conditional velocity-field network and LoRA adapters
  trainer     - flow-matching training, fine-tuning, checkpoints
  sampler     - fixed-step ODE samplers and image generation
  evalharness - classifier experiments, accuracy / ROC-AUC reporting
  cli         - command-line entry point
"""

__version__ = "0.1.0"
