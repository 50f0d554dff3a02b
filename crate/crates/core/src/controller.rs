// SPDX-License-Identifier: Apache-2.0

//! The learned policy as a rollout controller, with optional segment selection.

use crate::error::Result;
use crate::policy::TrainedPolicy;
use crate::sim::rollout::{ControlInput, Controller};
use crate::tss::{act_with_selection, SelectionRecord, TssRuntime};
use crate::types::BaseCommand;
use crate::CoreError;

pub struct PolicyController {
    pub live: TrainedPolicy,
    pub tss: Option<TssRuntime>,
    pub label: String,
    /// One record per control step while segment selection is active.
    pub log: Vec<SelectionRecord>,
    step: usize,
}

impl PolicyController {
    pub fn new(live: TrainedPolicy, tss: Option<TssRuntime>, label: impl Into<String>) -> Self {
        Self {
            live,
            tss,
            label: label.into(),
            log: vec![],
            step: 0,
        }
    }
}

impl Controller for PolicyController {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn needs_observation(&self) -> bool {
        true
    }

    fn command(&mut self, input: &ControlInput<'_>) -> Result<BaseCommand> {
        let obs = input
            .observation
            .ok_or_else(|| CoreError::Runtime("policy controller needs an observation".into()))?;
        let step = self.step;
        self.step += 1;
        match &self.tss {
            None => self.live.act(obs),
            Some(tss) => {
                let (cmd, sel) = act_with_selection(&mut self.live, tss, obs)?;
                self.log.push(SelectionRecord::new(step, &tss.library, sel));
                Ok(cmd)
            }
        }
    }
}
