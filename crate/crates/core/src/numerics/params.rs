use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// A parameter recorded on a tape during binding.
#[derive(Clone, Debug)]
pub struct BoundParam {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Places parameters on a tape in visiting order.
///
/// Trainable tensors become leaves, frozen ones constants. Every component
/// visits its parameters in the same order in `bind` and `tensors_mut`, so
/// the i-th bound parameter is the i-th mutable tensor.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    params: Vec<BoundParam>,
    prefix: Vec<String>,
    replay: Option<(Vec<Var>, usize)>,
}

/// Values of the trainable tensors visited by `bind`, in order.
pub fn trainable_values(bind: impl FnOnce(&mut Binder)) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut tape);
    bind(&mut b);
    let vars: Vec<Var> = b.finish().into_iter().filter(|p| p.trainable).map(|p| p.var).collect();
    vars.into_iter().map(|v| tape.value(v).clone()).collect()
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            params: Vec::new(),
            prefix: Vec::new(),
            replay: None,
        }
    }

    /// Binder that hands out `vars` for trainable parameters, in visiting
    /// order, instead of creating new leaves. Frozen ones stay constants.
    pub fn replay(tape: &'t mut Tape, vars: &[Var]) -> Self {
        let mut b = Self::new(tape);
        b.replay = Some((vars.to_vec(), 0));
        b
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn bind(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        let var = if trainable {
            match &mut self.replay {
                Some((vars, next)) => {
                    let v = *vars.get(*next).expect("replay binder ran out of variables");
                    *next += 1;
                    v
                }
                None => self.tape.leaf(t.clone()),
            }
        } else {
            self.tape.constant(t.clone())
        };
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.params.push(BoundParam {
            name: full,
            var,
            trainable,
        });
        var
    }

    pub fn params(&self) -> &[BoundParam] {
        &self.params
    }

    pub fn finish(self) -> Vec<BoundParam> {
        self.params
    }
}
