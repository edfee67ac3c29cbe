"""disclab: a desk-scale lab for intervertebral disc candidate refinement.

Subpackages:
  numkit          reverse-mode differentiable numeric core
  heatmap         Gaussian target rendering, peak extraction, MSE loss
  shape_attention gradient-based shape feature and pyramid recalibration block
  lookonce        permutation-invariant one-pass candidate refinement network
  baselines       exhaustive search-tree oracle and condition-based filter
  synthbench      synthetic spine-candidate benchmark and metric suite
  cli             command-line entry point (synth / train / eval / bench / demo)
"""

__version__ = "0.1.0"
