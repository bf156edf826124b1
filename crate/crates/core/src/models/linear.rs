//! Affine fixtures `F(x, p) = M x`, `G(x, p) = A x + B p + c`, `U0(x) = Q x + q`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

pub const CONFIG_NAME: &str = "linear-test";

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: Vec<f64>,
    /// Transport matrix; zero for the plain fixtures.
    pub m: DMatrix<f64>,
    /// Initial value `Q x + q`, when present.
    pub initial: Option<(DMatrix<f64>, Vec<f64>)>,
    pub discount: f64,
}

impl LinearSpec {
    /// `G = A x`, everything else zero.
    pub fn new(a: DMatrix<f64>) -> Self {
        let d = a.nrows();
        Self {
            a,
            b: DMatrix::zeros(d, d),
            c: vec![0.0; d],
            m: DMatrix::zeros(d, d),
            initial: None,
            discount: 0.0,
        }
    }

    /// `G = x`, `U0 = x`.
    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d)).with_initial(DMatrix::identity(d, d), vec![0.0; d])
    }

    pub fn with_offset(mut self, c: Vec<f64>) -> Self {
        self.c = c;
        self
    }

    pub fn with_value_coupling(mut self, b: DMatrix<f64>) -> Self {
        self.b = b;
        self
    }

    pub fn with_transport(mut self, m: DMatrix<f64>) -> Self {
        self.m = m;
        self
    }

    pub fn with_initial(mut self, q: DMatrix<f64>, q0: Vec<f64>) -> Self {
        self.initial = Some((q, q0));
        self
    }

    pub fn with_discount(mut self, r: f64) -> Self {
        self.discount = r;
        self
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if d == 0 || !square(&self.a) || !square(&self.b) || !square(&self.m) || self.c.len() != d {
            return Err(Error::InvalidSpec(format!("linear fixture: all blocks must be {d}x{d} and c of length {d}")));
        }
        if let Some((q, q0)) = &self.initial {
            if !square(q) || q0.len() != d {
                return Err(Error::InvalidSpec("linear fixture: initial map has the wrong shape".into()));
            }
        }
        Ok(())
    }
}

fn affine(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let y = m * DVector::from_column_slice(x);
    out.copy_from_slice(y.as_slice());
}

pub fn linear_model(spec: &LinearSpec) -> Result<ModelSpec> {
    spec.validate()?;
    let d = spec.dim();
    let m = spec.m.clone();
    let (a, b, c) = (spec.a.clone(), spec.b.clone(), spec.c.clone());
    let mut model = ModelSpec::new(
        d,
        move |x: &[f64], _: &[f64], o: &mut [f64]| affine(&m, x, o),
        move |x: &[f64], p: &[f64], o: &mut [f64]| {
            let g = &a * DVector::from_column_slice(x) + &b * DVector::from_column_slice(p);
            for i in 0..o.len() {
                o[i] = g[i] + c[i];
            }
        },
    )
    .named(CONFIG_NAME)
    .with_discount(spec.discount);
    if let Some((q, q0)) = spec.initial.clone() {
        model = model.with_initial(move |x: &[f64], o: &mut [f64]| {
            affine(&q, x, o);
            for (v, s) in o.iter_mut().zip(&q0) {
                *v += s;
            }
        });
    }
    Ok(model)
}
