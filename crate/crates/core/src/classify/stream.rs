use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;

use super::s4d::{gelu, S4dModel};
use super::{ClassifyError, ClassifyResult};

/// Discretized per-direction parameters for recurrent stepping.
#[derive(Debug, Clone)]
struct Discrete {
    abar: Array2<Complex64>,
    bbar: Array2<Complex64>,
    c: Array2<Complex64>,
    d: Array1<f64>,
}

/// Per-stream recurrent state. Unidirectional models advance every layer
/// one step at a time; bidirectional models buffer the window and scan it
/// both ways on [`S4dModel::finish`].
#[derive(Debug, Clone)]
pub struct StreamState {
    shape: (usize, usize, usize, usize),
    states: Vec<Array2<Complex64>>,
    buffer: Vec<Array1<f64>>,
    pooled: Array1<f64>,
    steps: usize,
}

impl StreamState {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self) {
        self.states.iter_mut().for_each(|s| s.fill(Complex64::new(0.0, 0.0)));
        self.buffer.clear();
        self.pooled.fill(0.0);
        self.steps = 0;
    }
}

impl S4dModel {
    fn signature(&self) -> (usize, usize, usize, usize) {
        let c = &self.config;
        (c.n_layers, c.d_model, c.d_state, c.n_directions())
    }

    fn discrete(&self) -> Vec<Vec<Discrete>> {
        self.layers
            .iter()
            .map(|l| {
                l.dirs
                    .iter()
                    .map(|d| {
                        let (abar, bbar, c) = d.discretize();
                        Discrete { abar, bbar, c, d: d.d.clone() }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn stream_state(&self) -> StreamState {
        let (l, h, n, _) = self.signature();
        StreamState {
            shape: self.signature(),
            states: (0..l).map(|_| Array2::zeros((h, n))).collect(),
            buffer: Vec::new(),
            pooled: Array1::zeros(h),
            steps: 0,
        }
    }

    /// Advance by one input step. Returns logits of the mean-pooled prefix
    /// for unidirectional models and `None` (buffered) for bidirectional ones.
    pub fn step(&self, state: &mut StreamState, input: ArrayView1<f64>) -> ClassifyResult<Option<Array1<f64>>> {
        if state.shape != self.signature() {
            return Err(ClassifyError::Shape("stream state was created for a different model".into()));
        }
        if input.len() != self.config.d_input {
            return Err(ClassifyError::Shape(format!(
                "model expects {} inputs per step, got {}",
                self.config.d_input,
                input.len()
            )));
        }
        if self.config.bidirectional {
            state.buffer.push(input.to_owned());
            state.steps += 1;
            return Ok(None);
        }
        let disc = self.discrete();
        let mut u = self.enc_w.dot(&input) + &self.enc_b;
        for (li, layer) in self.layers.iter().enumerate() {
            let dd = &disc[li][0];
            let x = &mut state.states[li];
            let mut y = Array1::zeros(u.len());
            for i in 0..u.len() {
                let mut acc = dd.d[i] * u[i];
                for j in 0..x.ncols() {
                    x[(i, j)] = dd.abar[(i, j)] * x[(i, j)] + dd.bbar[(i, j)] * u[i];
                    acc += (dd.c[(i, j)] * x[(i, j)]).re;
                }
                y[i] = acc;
            }
            let act = y.mapv(gelu);
            u = layer.mix_w.dot(&act) + &layer.mix_b + &u;
        }
        state.pooled += &u;
        state.steps += 1;
        let pooled = &state.pooled / state.steps as f64;
        Ok(Some(self.head_w.dot(&pooled) + &self.head_b))
    }

    /// Logits for everything pushed since the last reset.
    pub fn finish(&self, state: &mut StreamState) -> ClassifyResult<Array1<f64>> {
        if state.steps == 0 {
            return Err(ClassifyError::Parameter("no steps pushed to the stream".into()));
        }
        if !self.config.bidirectional {
            let pooled = &state.pooled / state.steps as f64;
            return Ok(self.head_w.dot(&pooled) + &self.head_b);
        }
        let views: Vec<ArrayView1<f64>> = state.buffer.iter().map(|v| v.view()).collect();
        let x = ndarray::stack(Axis(1), &views).map_err(|e| ClassifyError::Shape(e.to_string()))?;
        self.scan_sequence(x.view())
    }

    /// Full-sequence forward computed with recurrent scans (both directions).
    pub fn forward_recurrent(&self, x: ArrayView2<f64>) -> ClassifyResult<Array1<f64>> {
        if x.nrows() != self.config.d_input || x.ncols() == 0 {
            return Err(ClassifyError::Shape(format!(
                "expected [{} × T] input, got {:?}",
                self.config.d_input,
                x.dim()
            )));
        }
        if self.config.bidirectional {
            return self.scan_sequence(x);
        }
        let mut state = self.stream_state();
        let mut last = None;
        for col in x.axis_iter(Axis(1)) {
            last = self.step(&mut state, col)?;
        }
        Ok(last.expect("at least one step"))
    }

    fn scan_sequence(&self, x: ArrayView2<f64>) -> ClassifyResult<Array1<f64>> {
        let disc = self.discrete();
        let t_len = x.ncols();
        let mut u = self.enc_w.dot(&x) + &self.enc_b.view().insert_axis(Axis(1));
        let (h, n) = (self.config.d_model, self.config.d_state);
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Array2::zeros((layer.dirs.len() * h, t_len));
            for (di, dd) in disc[li].iter().enumerate() {
                for i in 0..h {
                    let mut state = vec![Complex64::new(0.0, 0.0); n];
                    let order: Box<dyn Iterator<Item = usize>> =
                        if di == 1 { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
                    for t in order {
                        let s = u[(i, t)];
                        let mut acc = dd.d[i] * s;
                        for (j, xj) in state.iter_mut().enumerate() {
                            *xj = dd.abar[(i, j)] * *xj + dd.bbar[(i, j)] * s;
                            acc += (dd.c[(i, j)] * *xj).re;
                        }
                        z[(di * h + i, t)] = acc;
                    }
                }
            }
            let act = z.mapv(gelu);
            let mut out = layer.mix_w.dot(&act) + &layer.mix_b.view().insert_axis(Axis(1));
            out += &u;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(ClassifyError::Numeric { layer: li, detail: "non-finite activations".into() });
            }
            u = out;
        }
        let pooled = u.mean_axis(Axis(1)).expect("non-empty");
        Ok(self.head_w.dot(&pooled) + &self.head_b)
    }
}
