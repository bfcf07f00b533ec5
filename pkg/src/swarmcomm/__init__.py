"""Low-degree communication policies for decentralized multi-agent planning.

Pipeline: train a full-communication attention policy on a differentiable
simulator, cache its per-step behavior, synthesize a small rule program that
imitates it while minimizing the maximum communication degree, then retrain
the networks under the program's hardened attention.
"""

from .autodiff import ParamStore, Tape, Tensor, adam_step, backward
from .dsl import (
    CommGraph,
    DetRule,
    FeatureMap,
    Program,
    RandRule,
    build_comm_graph,
    eval_program,
    eval_rule,
    featurize,
    max_degree,
    parse_program,
    print_program,
)
from .env import (
    GlobalAction,
    GlobalState,
    RewardParams,
    TaskConfig,
    Trajectory,
    apply_link_failure,
    observe,
    reward_formation,
    reward_unlabeled,
    rollout,
    sample_initial,
    step,
)
from .harness import Metrics, RunManifest, evaluate, report, sweep
from .policy import (
    CombinedPolicy,
    DistMaskPolicy,
    NoCommPolicy,
    TfFullPolicy,
    TopKAttnPolicy,
    hard_attention,
    make_policy,
)
from .synth import (
    SynthConfig,
    SynthDataset,
    collect_dataset,
    mcmc_synthesize,
    propose,
    surrogate_objective,
    synthesize_multiround,
)
from .training import TrainConfig, retrain, train_oracle
from .transformer import (
    TransformerParams,
    act,
    forward_policy,
    forward_round,
    init_for_task,
    init_transformer,
    message,
    soft_attention,
    squash_action,
)

__version__ = "0.1.0"
