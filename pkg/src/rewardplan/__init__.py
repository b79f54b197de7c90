"""Latent reward-prediction models with sampling-based MPC planning."""

__version__ = "0.1.0"

from .env import (EnvConfig, EpisodeFinishedError, MultiPendulumEnv, PendulumState,
                  angle_normalize, observe, pendulum_step, reward_fn)
from .nets import (AdamState, ForwardTape, Mlp, adam_init, adam_step, backward,
                   clip_grad_norm, deserialize_params, forward, mlp_init,
                   serialize_params)
from .models import (DeepMdpModel, LatentModel, StatePredModel, TrajectorySegment,
                     build_model, deepmdp_gradient, deepmdp_loss, encode,
                     latent_step, load_model, loss_gradient, multi_step_loss,
                     predict_reward, reward_head_gradient, reward_head_loss,
                     save_model, state_pred_gradient, state_pred_loss, unroll)
from .planning import (CemConfig, GroundTruthPendulumModel, MpcPolicy, Plan,
                       RolloutModel, cem_plan, evaluate_sequences, mpc_policy)
from .dataset import (OuNoise, ReplayDataset, collect_episode, collect_random,
                      sample_segments, sample_transitions)
from .training import (EvalStats, OnlineConfig, TrainLog, epsilon_greedy, evaluate,
                       train_offline, train_online)
from .theory import (BoundReport, DiscreteMdp, DiscretizedPendulum, QTable,
                     TabularLatentModel, TabularRolloutModel, check_bound,
                     discretize_pendulum, identity_latent, latent_q_n_exact,
                     measure_epsilon, offset_latent, q_n_exact)
from .config import ConfigError, ExperimentConfig
