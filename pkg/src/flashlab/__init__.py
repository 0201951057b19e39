"""Desk-scale continual-learning lab.

Adapts a tiny from-scratch language model to new tasks while anchoring old
behavior with label-free flashback prompts, latent task increments, and
gradient surgery; ships the baselines and the experiment harness that
measures forgetting and generalization on synthetic task suites.
"""

__version__ = "0.1.0"
