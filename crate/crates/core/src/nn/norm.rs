use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Var};

pub const GROUP_NORM_EPS: f64 = 1e-6;

/// Group normalization with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(scope: &mut Scope<'_>, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(shape_err!("{groups} groups do not divide {channels} channels"));
        }
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Const(1.0)),
            beta: scope.param("beta", &[channels], Init::Const(0.0)),
            groups,
            channels,
        })
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        x.group_norm(self.groups, &g, &b, GROUP_NORM_EPS)
    }
}
