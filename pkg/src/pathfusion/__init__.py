"""Two-stage histology/transcriptomics fusion with subspace distillation.

Stage I trains a multi-modal teacher that fuses slide feature grids at two
magnifications with tumor/microenvironment gene subsets through gene-guided
deformable attention, coordinated by confidence-aware gradient surgery and a
cross-scale attention-consistency loss. Stage II trains a slide-only student
built on deformable self-attention and density-peak token aggregation, first
on the task loss alone and then by distilling the teacher's predictions and
concatenated subspace representations.
"""

__version__ = "0.1.0"
