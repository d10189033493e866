"""Greedy agent selection with recurrent policy synthesis for secret inference in factored Dec-POMDPs."""

from .inference import (classify_episodes, exact_conditional_entropy, exact_mutual_information,
                        mc_conditional_entropy, prior_entropy)
from .model import (AgentBlock, ConfigError, EnvironmentChain, FactoredDecPomdp, FixedPolicySet,
                    ModelError, SecretMap, flatten, model_from_dict)
from .optimizer import OptimizerConfig, ipg_baseline, optimize_policy
from .selection import GainEvaluator, GradientInner, imas2

__all__ = [
    "AgentBlock", "ConfigError", "EnvironmentChain", "FactoredDecPomdp", "FixedPolicySet", "GainEvaluator",
    "GradientInner", "ModelError", "OptimizerConfig", "SecretMap", "classify_episodes",
    "exact_conditional_entropy", "exact_mutual_information", "flatten", "imas2", "ipg_baseline",
    "mc_conditional_entropy", "model_from_dict", "optimize_policy", "prior_entropy",
]
