"""
Cross-view image synthesis

Two-stage aerial/ground image translation with attention refinement,
deformable convolutions and semantic-guided adversarial losses, on a
from-scratch numpy autodiff core.
"""

__version__ = "1.0.0"
__description__ = "Desk-scale cross-view image synthesis with semantic guidance"
