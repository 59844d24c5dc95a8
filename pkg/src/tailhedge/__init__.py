"""Tail-aware distributional RL for option gamma hedging."""

from .agent import (AgentConfig, AgentNets, Batch, ReplayBuffer, actor_action,
                    build_nets, critic_update, actor_update, tail_update,
                    sample_target, target_sync, train_step)
from .gpd import (GpdParams, gpd_cdf, gpd_log_likelihood, gpd_loglik_grad,
                  gpd_mean, gpd_quantile, gpd_sample)
from .harness import (ConfigError, EvalReport, RunConfig, config_from_dict,
                      emit_report, evaluate_policy, load_config, run_eval,
                      run_sweep, run_train)
from .market import (EnvState, HedgingEnv, MarketParams, OptionContract,
                     StepRecord, Transition, bsm_delta, bsm_gamma, bsm_price,
                     gamma_hedge_ratio, gbm_step, poisson_arrivals,
                     write_episode_log)
from .nets import AdamState, MlpSpec, backward, forward, init_params, opt_step
from .quantiles import (QuantileDistribution, RiskMeasureSpec, cvar_alpha,
                        pinball, qr_loss_two_part, risk_measure, threshold,
                        var_alpha)

__version__ = "0.1.0"
