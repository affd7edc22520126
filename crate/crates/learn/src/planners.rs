//! Closed-loop planners backed by the learned policy.

use ritp_core::par::Parallelism;
use ritp_core::post_opt::{predict_all, refine, PostOptConfig};
use ritp_core::sim::{Observation, Plan, PlanError, Planner};

use crate::features::SceneInput;
use crate::motionformer::MotionFormer;

/// The policy's most probable refined mode, executed as is.
pub struct RitpPlanner {
    pub actor: MotionFormer,
}

impl Planner for RitpPlanner {
    fn name(&self) -> &str {
        "ritp"
    }

    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError> {
        let scene = SceneInput::from_observation(obs);
        self.actor
            .select_action(&scene)
            .map(Plan::new)
            .map_err(|e| PlanError(e.to_string()))
    }
}

/// Policy output refined by rule scoring and spline QP post-optimization.
pub struct RitpHybrid {
    pub actor: MotionFormer,
    pub post: PostOptConfig,
    pub parallelism: Parallelism,
}

impl RitpHybrid {
    pub fn new(actor: MotionFormer, parallelism: Parallelism) -> Self {
        let post = PostOptConfig::desk(actor.config.plan_steps);
        Self {
            actor,
            post,
            parallelism,
        }
    }
}

impl Planner for RitpHybrid {
    fn name(&self) -> &str {
        "ritp-hybrid"
    }

    fn plan(&self, obs: &Observation) -> Result<Plan, PlanError> {
        let scene = SceneInput::from_observation(obs);
        let action = self.actor.select_action(&scene).map_err(|e| PlanError(e.to_string()))?;
        let predicted = predict_all(&obs.agents, obs.plan_steps);
        let out = refine(&action, &obs.ego, obs.scenario, &predicted, &self.post, self.parallelism);
        Ok(Plan {
            action: out.action,
            fallback: out.fallback.is_some(),
        })
    }
}
