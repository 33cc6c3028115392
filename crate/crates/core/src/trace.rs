use std::sync::Mutex;

/// Ordered set of pipeline stage names, in order of first execution.
#[derive(Debug, Default)]
pub struct Trace {
    stages: Mutex<Vec<&'static str>>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: &'static str) {
        let mut s = self.stages.lock().expect("trace lock");
        if !s.contains(&stage) {
            s.push(stage);
        }
    }

    pub fn stages(&self) -> Vec<&'static str> {
        self.stages.lock().expect("trace lock").clone()
    }
}

/// Record into an optional trace.
pub(crate) fn note(trace: Option<&Trace>, stage: &'static str) {
    if let Some(t) = trace {
        t.record(stage);
    }
}
