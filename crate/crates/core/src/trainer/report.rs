use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Alignment objective over the whole concept subset at epoch end.
    pub align_obj: f64,
    /// Cumulative accepted rotation updates.
    pub q_accepts: usize,
}

/// One rotation-update trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct QUpdateRecord {
    pub trigger: usize,
    pub epoch: usize,
    pub batch: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Alignment objective over the whole concept subset, old and new `Q`.
    pub full_objective_before: f64,
    pub full_objective_after: f64,
    pub eta: f64,
    pub trials: usize,
    pub accepted: bool,
    pub orthogonality_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub header: String,
    pub epochs: Vec<EpochRecord>,
    pub q_updates: Vec<QUpdateRecord>,
    /// Epoch whose weights were kept (0 means the initialization).
    pub best_epoch: usize,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

pub const REPORT_COLUMNS: &str = "epoch,train_loss,train_acc,val_loss,val_acc,align_obj,q_accepts";

impl TrainReport {
    pub fn accepted_updates(&self) -> usize {
        self.q_updates.iter().filter(|u| u.accepted).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# config: {}", self.header).expect("string write");
        writeln!(out, "{REPORT_COLUMNS}").expect("string write");
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.align_obj, r.q_accepts
            )
            .expect("string write");
        }
        writeln!(out, "# best_epoch: {}", self.best_epoch).expect("string write");
        if let (Some(acc), Some(loss)) = (self.test_accuracy, self.test_loss) {
            writeln!(out, "# test: accuracy={acc} loss={loss}").expect("string write");
        }
        out
    }

    pub fn q_trace_csv(&self) -> String {
        let mut out = String::from(
            "trigger,epoch,batch,objective_before,objective_after,full_objective_before,full_objective_after,eta,trials,accepted,orthogonality_residual\n",
        );
        for u in &self.q_updates {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:e}",
                u.trigger,
                u.epoch,
                u.batch,
                u.objective_before,
                u.objective_after,
                u.full_objective_before,
                u.full_objective_after,
                u.eta,
                u.trials,
                u8::from(u.accepted),
                u.orthogonality_residual
            )
            .expect("string write");
        }
        out
    }
}
