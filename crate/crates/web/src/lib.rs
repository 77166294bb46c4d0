//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; the logic lives in ordinary functions so it is testable natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use qkd_relay::keycore::{sha256, KeyTable, NetworkKeySource, TableScope};
use qkd_relay::qkdlink::{DisturbanceWindow, LinkEmulator, LinkProfile};
use qkd_relay::relayproto::{decode_wire, encode_wire, KeyHop, Payload, TransferPolicy, WireMessage};
use qkd_relay::simharness::{bundled, derive_nk_seed, derive_psk, run_sim, SimOptions};
use qkd_relay::telemetry::summarize;

const MAX_DURATION_S: f64 = 7200.0;
const MAX_CYCLES: u32 = 20_000;

/// Runs the Table-1 chain and returns the pool sawtooth of every link end,
/// the trigger list and the network key rate.
pub fn sawtooth(duration_s: f64, threshold: u32, reserve: u32, seed: u32, hop_delay_s: f64) -> Result<Value, String> {
    if !(0.0..=MAX_DURATION_S).contains(&duration_s) {
        return Err(format!("duration must be within 0..{MAX_DURATION_S} s"));
    }
    if !(0.0..=10.0).contains(&hop_delay_s) {
        return Err("per-hop delay must be within 0..10 s".to_string());
    }
    let mut sc = bundled("epb_table1").expect("bundled");
    sc.duration_s = duration_s;
    sc.seed = seed as u64;
    sc.per_hop_delay_s = hop_delay_s;
    sc.policy = TransferPolicy::new(threshold as usize, reserve as usize).map_err(|e| e.to_string())?;
    let rep = run_sim(&sc, &SimOptions::default()).map_err(|e| e.to_string())?;

    let mut pools = serde_json::Map::new();
    for key in rep.telemetry.keys().filter(|k| k.measurement == "pool") {
        let pts: Vec<[f64; 2]> = rep
            .telemetry
            .series(key)
            .filter_map(|p| Some([p.timestamp_ns as f64 / 1e9, p.get("available_qk")?]))
            .collect();
        pools.insert(format!("{} qk{}", key.tags["node"], key.tags["link"]), json!(pts));
    }
    let s = &rep.summary;
    Ok(json!({
        "duration_s": duration_s,
        "threshold": threshold,
        "reserve": reserve,
        "nk_at_en": s.nk_at_en,
        "nk_rate": s.nk_rate,
        "triggers": s.triggers.iter().map(|t| json!({"t": t.time_us as f64 / 1e6, "h": t.h})).collect::<Vec<_>>(),
        "keys_failed": s.keys_failed(),
        "pools": pools,
    }))
}

/// Samples `cycles` cycles of one Table-1 link, optionally under a constant
/// disturbance, and reduces them to mean ± std.
pub fn link_stats(link: u8, cycles: u32, seed: u32, qber_add_pct: f64, skr_scale: f64) -> Result<Value, String> {
    let profile = LinkProfile::table1(link).ok_or_else(|| format!("no link {link}; the chain has links 1 to 3"))?;
    if cycles == 0 || cycles > MAX_CYCLES {
        return Err(format!("cycles must be within 1..{MAX_CYCLES}"));
    }
    let horizon = profile.cycle_time(cycles as u64) + 1.0;
    let window = DisturbanceWindow { link_index: link, start_s: 0.0, end_s: horizon, qber_add_pct, skr_scale };
    let errs = window.validate();
    if !errs.is_empty() {
        return Err(errs.join("; "));
    }
    let windows = [window];
    let mut em = LinkEmulator::new(profile.clone(), LinkEmulator::seed_for(seed as u64, link), Vec::new());
    let (mut skr, mut qber) = (Vec::new(), Vec::new());
    for _ in 0..cycles {
        let c = em.run_cycle(&windows);
        skr.push(c.skr_bps);
        qber.push(c.qber_pct);
    }
    let st = |xs: &[f64]| summarize(xs).map(|s| json!({"mean": s.mean, "std": s.std, "n": s.n})).map_err(|e| e.to_string());
    let over = qber.iter().filter(|q| **q > profile.compromise_threshold_pct).count();
    Ok(json!({
        "link": link,
        "protocol": profile.protocol.name(),
        "configured": {
            "skr_mean": profile.skr_mean_bps, "skr_std": profile.skr_std_bps,
            "qber_mean": profile.qber_mean_pct, "qber_std": profile.qber_std_pct,
        },
        "skr": st(&skr)?,
        "qber": st(&qber)?,
        "compromised_cycles": over,
        "threshold_pct": profile.compromise_threshold_pct,
        "skr_series": skr,
        "qber_series": qber,
    }))
}

/// Carries one network key across the three links, printing what each hop
/// puts on the wire. `tamper_link` (1..=3, 0 for none) flips `bit` of that
/// hop's ciphertext before it is sealed.
pub fn relay(seed: u32, tamper_link: u8, bit: u32) -> Result<Value, String> {
    if tamper_link > 3 {
        return Err("tamper link must be 0 (none) or 1..3".to_string());
    }
    let seed = seed as u64;
    let nk = NetworkKeySource::new(derive_nk_seed(seed)).draw(1).remove(0);
    let digest = *nk.digest();
    let mut carried = *nk.bits();
    let mut hops = Vec::new();
    let mut ok = true;
    for link in 1..=3u8 {
        // both ends hold the same link key
        let mut left = KeyTable::new(TableScope::QuantumLink(link));
        left.ingest_key(&sha256(&[&derive_psk(seed, "demo-qk", link as u32)[..], b"qk"].concat()));
        let mut right = left.clone();
        let (mut ct, qk_id) = left.otp_encrypt(&carried).map_err(|e| e.to_string())?;
        let tampered = tamper_link == link;
        if tampered {
            let b = (bit % 256) as usize;
            ct[b / 8] ^= 0x80 >> (b % 8);
        }
        let hop = KeyHop { batch_id: 1, index: 0, nk_id: nk.id(), nk_digest: digest, ciphertext: ct, qk_id };
        let psk = derive_psk(seed, "relay", link as u32);
        let frame = encode_wire(&WireMessage { sequence: link as u64, payload: Payload::KeyHop(hop) }, &psk);
        let Payload::KeyHop(got) = decode_wire(&frame, &psk).map_err(|e| e.to_string())?.payload else {
            return Err("unexpected payload".to_string());
        };
        let plain = right.otp_decrypt(&got.ciphertext, got.qk_id).map_err(|e| e.to_string())?;
        let digest_ok = sha256(&plain) == got.nk_digest;
        hops.push(json!({
            "link": link,
            "from": if link == 1 { "NM".to_string() } else { format!("TN{}", link - 1) },
            "to": if link == 3 { "EN".to_string() } else { format!("TN{link}") },
            "qk_id": qk_id,
            "ciphertext": hex::encode(got.ciphertext),
            "frame": hex::encode(&frame),
            "tampered": tampered,
            "digest_ok": digest_ok,
        }));
        if !digest_ok {
            ok = false;
            break;
        }
        carried = plain;
    }
    Ok(json!({
        "nk_id": nk.id(),
        "nk_digest": hex::encode(digest),
        "delivered": ok,
        "delivered_matches": ok && carried == *nk.bits(),
        "hops": hops,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(duration_s: f64, threshold: u32, reserve: u32, seed: u32, hop_delay_s: f64) -> Result<String, JsValue> {
    to_js(sawtooth(duration_s, threshold, reserve, seed, hop_delay_s))
}

#[wasm_bindgen]
pub fn sample_link(link: u8, cycles: u32, seed: u32, qber_add_pct: f64, skr_scale: f64) -> Result<String, JsValue> {
    to_js(link_stats(link, cycles, seed, qber_add_pct, skr_scale))
}

#[wasm_bindgen]
pub fn relay_key(seed: u32, tamper_link: u8, bit: u32) -> Result<String, JsValue> {
    to_js(relay(seed, tamper_link, bit))
}
