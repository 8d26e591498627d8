use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Var};

/// Affine map over the last axis; weight is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_features: usize, out_features: usize, bias: bool) -> Self {
        let init = Init::fan_in(in_features);
        let weight = scope.param("weight", &[out_features, in_features], init);
        let bias = bias.then(|| scope.param("bias", &[out_features], init));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let w = tape.param(ps, self.weight);
        let b = self.bias.map(|b| tape.param(ps, b));
        x.linear(&w, b.as_ref())
    }
}
