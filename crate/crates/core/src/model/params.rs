//! Parameter containers, generic over the leaf type so one layout serves
//! weights (`Tensor`), tape handles (`Var`), gradients, and optimizer moments.

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

/// One residual depth-wise separable block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub pw1: Conv<P>,
    pub prelu1: P,
    pub bn1: Norm<P>,
    pub ddw: Conv<P>,
    pub prelu2: P,
    pub bn2: Norm<P>,
    pub pw2: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate<P> {
    pub pw_a: Conv<P>,
    pub pw_b: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub front: Conv<P>,
    pub blocks: Vec<Block<P>>,
    /// Empty when gating is disabled.
    pub gates: Vec<Gate<P>>,
    pub back: Conv<P>,
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Norm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<P> Block<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Block<Q> {
        Block {
            pw1: self.pw1.map(f),
            prelu1: f(&self.prelu1),
            bn1: self.bn1.map(f),
            ddw: self.ddw.map(f),
            prelu2: f(&self.prelu2),
            bn2: self.bn2.map(f),
            pw2: self.pw2.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.pw1.visit(&format!("{prefix}.pw1"), f);
        f(format!("{prefix}.prelu1"), &self.prelu1);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.ddw.visit(&format!("{prefix}.ddw"), f);
        f(format!("{prefix}.prelu2"), &self.prelu2);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.pw2.visit(&format!("{prefix}.pw2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        self.pw1.visit_mut(&format!("{prefix}.pw1"), f);
        f(format!("{prefix}.prelu1"), &mut self.prelu1);
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        self.ddw.visit_mut(&format!("{prefix}.ddw"), f);
        f(format!("{prefix}.prelu2"), &mut self.prelu2);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
        self.pw2.visit_mut(&format!("{prefix}.pw2"), f);
    }
}

impl<P> Gate<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Gate<Q> {
        Gate {
            pw_a: self.pw_a.map(f),
            pw_b: self.pw_b.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.pw_a.visit(&format!("{prefix}.pw_a"), f);
        self.pw_b.visit(&format!("{prefix}.pw_b"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
        self.pw_a.visit_mut(&format!("{prefix}.pw_a"), f);
        self.pw_b.visit_mut(&format!("{prefix}.pw_b"), f);
    }
}

impl<P> Params<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Params<Q> {
        Params {
            front: self.front.map(&mut f),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            gates: self.gates.iter().map(|g| g.map(&mut f)).collect(),
            back: self.back.map(&mut f),
        }
    }

    /// Visits every trainable leaf with its stable name, in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a P)) {
        self.front.visit("front", &mut f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut f);
        }
        for (i, g) in self.gates.iter().enumerate() {
            g.visit(&format!("gates.{i}"), &mut f);
        }
        self.back.visit("back", &mut f);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(String, &'a mut P)) {
        self.front.visit_mut("front", &mut f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), &mut f);
        }
        for (i, g) in self.gates.iter_mut().enumerate() {
            g.visit_mut(&format!("gates.{i}"), &mut f);
        }
        self.back.visit_mut("back", &mut f);
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(|_, p| out.push(p));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(|_, p| out.push(p));
        out
    }
}
