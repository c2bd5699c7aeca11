"""Age-of-information task scheduling toolkit.

Subpackages cover the fractional MDP solver family (:mod:`aoisched.fracmdp`,
:mod:`aoisched.fql`), the continuous-time device/edge simulator
(:mod:`aoisched.sim`), exact AoI accounting (:mod:`aoisched.aoi`), reference
scheduling policies (:mod:`aoisched.baselines`), the learning-client wire
protocol (:mod:`aoisched.bridge`), and the experiment harness
(:mod:`aoisched.harness`).
"""

__version__ = "0.1.0"
