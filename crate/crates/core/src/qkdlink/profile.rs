use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "BBM92")]
    Bbm92,
    #[serde(rename = "BB84")]
    Bb84,
    #[serde(rename = "SARG04")]
    Sarg04,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BBM92" => Some(Protocol::Bbm92),
            "BB84" => Some(Protocol::Bb84),
            "SARG04" => Some(Protocol::Sarg04),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Bbm92 => "BBM92",
            Protocol::Bb84 => "BB84",
            Protocol::Sarg04 => "SARG04",
        }
    }
}

/// How a vendor system hands key material to the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    /// Transmit-only serial line carrying QIX-like frames.
    PacketStream,
    /// Key file that only ever grows.
    AppendFile,
    /// Key file replaced wholesale each cycle.
    RewriteFile,
}

impl DeliveryMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "packet_stream" => Some(DeliveryMode::PacketStream),
            "append_file" => Some(DeliveryMode::AppendFile),
            "rewrite_file" => Some(DeliveryMode::RewriteFile),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeliveryMode::PacketStream => "packet_stream",
            DeliveryMode::AppendFile => "append_file",
            DeliveryMode::RewriteFile => "rewrite_file",
        }
    }
}

/// Statistical description of one QKD link at its secret-key output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    /// 1-based position in the linear chain.
    pub link_index: u8,
    pub protocol: Protocol,
    pub length_km: f64,
    pub loss_db: f64,
    pub skr_mean_bps: f64,
    pub skr_std_bps: f64,
    pub qber_mean_pct: f64,
    pub qber_std_pct: f64,
    /// Keys of a cycle whose QBER exceeds this are flagged compromised
    /// (only the packet stream carries the flag).
    pub compromise_threshold_pct: f64,
    pub delivery: DeliveryMode,
    pub cycle_period_s: f64,
    /// Completion time of the first cycle; cycle `k` completes at
    /// `phase_s + k * cycle_period_s`.
    pub phase_s: f64,
}

impl LinkProfile {
    /// Field-test profile for link `n` of the four-node utility chain.
    ///
    /// Link 1 delivers one 256-bit key every 2 s over a serial stream.
    /// Its QBER is internal to the vendor box and only surfaces as the
    /// compromise flag; 3.0 ± 0.5 % is an assumed operating point.
    pub fn table1(n: u8) -> Option<Self> {
        let p = match n {
            1 => LinkProfile {
                link_index: 1,
                protocol: Protocol::Bbm92,
                length_km: 3.4,
                loss_db: 1.3,
                skr_mean_bps: 128.0,
                skr_std_bps: 0.0,
                qber_mean_pct: 3.0,
                qber_std_pct: 0.5,
                compromise_threshold_pct: 13.0,
                delivery: DeliveryMode::PacketStream,
                cycle_period_s: 2.0,
                phase_s: 1.0,
            },
            2 => LinkProfile {
                link_index: 2,
                protocol: Protocol::Bb84,
                length_km: 10.2,
                loss_db: 3.1,
                skr_mean_bps: 1310.0,
                skr_std_bps: 150.0,
                qber_mean_pct: 3.9,
                qber_std_pct: 1.3,
                compromise_threshold_pct: 13.0,
                delivery: DeliveryMode::AppendFile,
                cycle_period_s: 5.0,
                phase_s: 5.0,
            },
            3 => LinkProfile {
                link_index: 3,
                protocol: Protocol::Sarg04,
                length_km: 8.3,
                loss_db: 2.9,
                skr_mean_bps: 1892.0,
                skr_std_bps: 126.0,
                qber_mean_pct: 1.4,
                qber_std_pct: 0.1,
                compromise_threshold_pct: 13.0,
                delivery: DeliveryMode::RewriteFile,
                cycle_period_s: 8.0,
                phase_s: 8.0,
            },
            _ => return None,
        };
        Some(p)
    }

    /// Returns every violated constraint, empty when the profile is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.link_index;
        if n == 0 {
            errs.push("link index must be >= 1".to_string());
        }
        if !(self.skr_mean_bps > 0.0) {
            errs.push(format!("link {n}: skr_mean_bps must be > 0"));
        }
        if !(self.skr_std_bps >= 0.0) || !(self.qber_std_pct >= 0.0) {
            errs.push(format!("link {n}: standard deviations must be >= 0"));
        }
        if !(0.0..50.0).contains(&self.qber_mean_pct) {
            errs.push(format!("link {n}: qber_mean_pct must be in [0, 50)"));
        }
        if !(self.loss_db >= 0.0) {
            errs.push(format!("link {n}: loss_db must be >= 0"));
        }
        if !(self.length_km >= 0.0) {
            errs.push(format!("link {n}: length_km must be >= 0"));
        }
        if !(self.cycle_period_s > 0.0) {
            errs.push(format!("link {n}: cycle_period_s must be > 0"));
        }
        if !(self.phase_s >= 0.0) {
            errs.push(format!("link {n}: phase_s must be >= 0"));
        }
        if !(self.compromise_threshold_pct > 0.0) {
            errs.push(format!("link {n}: compromise_threshold_pct must be > 0"));
        }
        errs
    }

    /// Completion time of cycle `k`.
    pub fn cycle_time(&self, k: u64) -> f64 {
        self.phase_s + k as f64 * self.cycle_period_s
    }
}

/// Scripted disturbance on one link, e.g. wind moving aerial fibre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceWindow {
    pub link_index: u8,
    pub start_s: f64,
    pub end_s: f64,
    pub qber_add_pct: f64,
    pub skr_scale: f64,
}

impl DisturbanceWindow {
    pub fn is_active(&self, link_index: u8, now_s: f64) -> bool {
        self.link_index == link_index && self.start_s <= now_s && now_s < self.end_s
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.start_s < self.end_s) {
            errs.push(format!(
                "disturbance on link {}: start_s {} must be < end_s {}",
                self.link_index, self.start_s, self.end_s
            ));
        }
        if !(0.0..=1.0).contains(&self.skr_scale) {
            errs.push(format!("disturbance on link {}: skr_scale must be in [0, 1]", self.link_index));
        }
        errs
    }
}
