"""Desk-scale autonomous suturing stack on synthetic perception.

Subpackages cover stereo needle pose estimation from binary masks, joint
offset calibration from monocular jaw features, PI servo control with
offset compensation, and circular suture trajectory planning.
"""

__version__ = "0.1.0"
