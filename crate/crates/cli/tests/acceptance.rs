// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use tlt_core::crypto::{self, Entropy, DIGEST_LEN, PUBLIC_KEY_LEN, SIGNATURE_LEN};
use tlt_core::device::{device_birth, RESPONSE_LEN};
use tlt_core::document::{make_manufacturer_certificate, make_root_certificate, verify_chain, Document};
use tlt_core::store::{Store, StoreError, StoreQuery};
use tlt_core::threats::{self, Ecosystem, ScenarioId};
use tlt_core::transport::{self, DataFrame, MsgType, FRAGMENT_PAYLOAD, MAX_ADV_FRAME, MAX_DATA_FRAME, MAX_EXTENDED_FRAME};
use tlt_core::verifier::{StateCheck, Verifier};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn tlt(dir: &std::path::Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tlt"))
        .current_dir(dir)
        .env("TLT_STORE", dir.join("store.tltlog"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("tlt {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn happy_path() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("fw.bin"), b"door lock firmware 3.1").map_err(|e| e.to_string())?;
    fs::write(d.join("cfg.bin"), b"auto-lock=30s").map_err(|e| e.to_string())?;
    let start = Instant::now();
    tlt(d, &["authority", "init", "--key", "auth.tltkey"])?;
    tlt(d, &["mfr", "register", "--key", "mfr.tltkey", "--authority-key", "auth.tltkey", "--info", "Acme"])?;
    tlt(d, &["device", "birth", "--mfr-key", "mfr.tltkey", "--cert", "mfr.tltmcrt", "--dinf", "lock", "--state", "dev.tltdev"])?;
    tlt(d, &["mfr", "sign-fw", "--key", "mfr.tltkey", "--cert", "mfr.tltmcrt", "--image", "fw.bin", "--meta", "3.1", "--out", "fw.tltfw"])?;
    tlt(d, &["device", "install", "--state", "dev.tltdev", "--fw", "fw.tltfw", "--image", "fw.bin"])?;
    tlt(d, &["device", "configure", "--state", "dev.tltdev", "--config", "cfg.bin", "--seq", "1"])?;
    tlt(d, &["device", "advertise", "--state", "dev.tltdev"])?;
    let out = tlt(d, &["verify", "challenge", "--device", "dev.tltdev"])?;
    let elapsed = start.elapsed();
    let verdict = out.lines().find(|l| l.starts_with("VERDICT ")).ok_or("no verdict line")?;
    check(verdict.contains("state=verified_current gate=1"), verdict)?;
    check(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("verified_current gate=1 in {:.0} ms", elapsed.as_secs_f64() * 1000.0))
}

fn size_bounds() -> Outcome {
    let mut eco = Ecosystem::new(Entropy::seeded(2)).map_err(|e| e.to_string())?;
    let dev = eco.honest_device("sensor").map_err(|e| e.to_string())?;
    let adv = dev.advertise().encode();
    check(adv.len() == 19 && adv.len() <= MAX_ADV_FRAME, format!("advertisement is {} bytes", adv.len()))?;

    let mut v = Verifier::new(Entropy::seeded(3));
    let (session, challenge) = v.issue_challenge(dev.uuid()).map_err(|e| e.to_string())?;
    check(challenge.len() == 1 && challenge[0].encode().len() <= MAX_DATA_FRAME, "challenge needs more than one frame")?;

    let resp = dev.handle_challenge(&session.challenge, &eco.entropy).map_err(|e| e.to_string())?.to_bytes();
    check(resp.len() == RESPONSE_LEN && RESPONSE_LEN == 128, format!("response is {} bytes", resp.len()))?;
    let frames = transport::fragment(MsgType::Response, &resp, false).map_err(|e| e.to_string())?;
    check(frames.len() == 1 && frames[0].encode().len() <= MAX_DATA_FRAME, "response needs more than one frame")?;

    let big = crypto::random_bytes(&eco.entropy, 1650).map_err(|e| e.to_string())?;
    for extended in [false, true] {
        let frames = transport::fragment(MsgType::Fragment, &big, extended).map_err(|e| e.to_string())?;
        let limit = if extended { MAX_EXTENDED_FRAME } else { MAX_DATA_FRAME };
        check(frames.iter().all(|f| f.encode().len() <= limit), "fragment over the frame limit")?;
        let decoded: Vec<DataFrame> =
            frames.iter().rev().map(|f| DataFrame::decode(&f.encode())).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let (_, back) = transport::reassemble(&decoded).map_err(|e| e.to_string())?;
        check(back == big, "1650-byte payload did not round-trip")?;
    }
    let oversize = vec![0u8; FRAGMENT_PAYLOAD * 255 + 1];
    check(transport::fragment(MsgType::Fragment, &oversize, false).is_err(), "oversized payload accepted")?;
    Ok("adv 19 B, challenge and response single frames, response 128 B, 1650 B round trip".into())
}

fn crypto_sizes() -> Outcome {
    let e = Entropy::seeded(4);
    for i in 0..64u32 {
        let (pk, sk) = crypto::generate_keypair(&e).map_err(|e| e.to_string())?;
        let msg = i.to_be_bytes();
        let sig = crypto::sign(&sk, &msg).map_err(|e| e.to_string())?;
        check(pk.as_bytes().len() == 32 && PUBLIC_KEY_LEN == 32, "public key size")?;
        check(sig.as_bytes().len() == 64 && SIGNATURE_LEN == 64, "signature size")?;
        check(crypto::hash(&msg).as_bytes().len() == 32 && DIGEST_LEN == 32, "digest size")?;
        check(crypto::verify(&pk, &msg, &sig), "signature does not verify")?;
    }
    Ok("public key 32 B, signature 64 B, digest 32 B".into())
}

fn threat_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tlt(dir.path(), &["threats", "run", "--seed", "2024"])?;
    let b = tlt(dir.path(), &["threats", "run", "--seed", "2024"])?;
    check(a == b, "threat reports differ between runs with the same seed")?;
    check(a.contains("SUMMARY passed=7 failed=0"), "not every scenario passed")?;
    for id in ScenarioId::ALL {
        let report = threats::run_scenario(id, 2024).map_err(|e| e.to_string())?;
        check(report.passed, format!("{id} failed"))?;
        if id != ScenarioId::Honest {
            check(!report.fired.is_empty() && report.fired.is_subset(&id.mapped_controls()), format!("{id} fired controls outside its mapping"))?;
        } else {
            check(report.primary().gate, "honest control gate closed")?;
        }
    }
    Ok("TA01-TA06 and honest control pass, deterministic, fired controls within mapping".into())
}

fn chain_soundness() -> Outcome {
    let e = Entropy::seeded(5);
    let (apk, ask) = crypto::generate_keypair(&e).map_err(|e| e.to_string())?;
    let root = make_root_certificate("root", &apk, &ask).map_err(|e| e.to_string())?;
    let (mpk, msk) = crypto::generate_keypair(&e).map_err(|e| e.to_string())?;
    let mfr = make_manufacturer_certificate("mfr", &mpk, &ask, &e).map_err(|e| e.to_string())?;
    let (_, dcrt) = device_birth(&mfr, &msk, &root, "thermostat", &e).map_err(|e| e.to_string())?;
    let chain = [dcrt.document().clone(), mfr.document().clone(), root.document().clone()];
    verify_chain(&chain, &root).map_err(|e| format!("intact chain rejected: {e}"))?;

    let leaf = dcrt.encode();
    let start = Instant::now();
    let mut rejected = 0usize;
    let total = leaf.len() * 8;
    for bit in 0..total {
        let mut bytes = leaf.clone();
        bytes[bit / 8] ^= 1 << (bit % 8);
        let accepted = match Document::decode(&bytes) {
            Ok(doc) => verify_chain(&[doc, chain[1].clone(), chain[2].clone()], &root).is_ok(),
            Err(_) => false,
        };
        if !accepted {
            rejected += 1;
        }
    }
    let elapsed = start.elapsed();
    check(rejected == total, format!("{} of {total} corrupted leaves accepted", total - rejected))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{rejected}/{total} bit flips rejected in {:.2} s", elapsed.as_secs_f64()))
}

fn replay_resistance() -> Outcome {
    let mut eco = Ecosystem::new(Entropy::seeded(6)).map_err(|e| e.to_string())?;
    let dev = eco.honest_device("camera").map_err(|e| e.to_string())?;
    let mut v = Verifier::new(Entropy::seeded(7));
    let mut detected = 0;
    for _ in 0..100 {
        let (s, _) = v.issue_challenge(dev.uuid()).map_err(|e| e.to_string())?;
        let captured = dev.handle_challenge(&s.challenge, &eco.entropy).map_err(|e| e.to_string())?.to_bytes();
        let first = v.verify_response(dev.uuid(), &captured, &eco.store).map_err(|e| e.to_string())?;
        check(first.state_check == StateCheck::VerifiedCurrent, "genuine response rejected")?;
        v.issue_challenge(dev.uuid()).map_err(|e| e.to_string())?;
        let replay = v.verify_response(dev.uuid(), &captured, &eco.store).map_err(|e| e.to_string())?;
        if replay.state_check == StateCheck::ReplayDetected && !replay.gate {
            detected += 1;
        }
    }
    check(detected == 100, format!("{detected}/100 replays detected"))?;
    Ok("100/100 replays detected".into())
}

fn store_durability() -> Outcome {
    let mut eco = Ecosystem::new(Entropy::seeded(8)).map_err(|e| e.to_string())?;
    let mut devices = Vec::new();
    for i in 0..3 {
        devices.push(eco.honest_device(&format!("unit {i}")).map_err(|e| e.to_string())?);
    }
    let records = eco.store.records().len();
    check(records >= 10, format!("only {records} records"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("store.tltlog");
    eco.store.persist(&path).map_err(|e| e.to_string())?;
    let loaded = Store::load(&path).map_err(|e| e.to_string())?;
    check(loaded.records() == eco.store.records(), "records differ after reload")?;
    for dev in &devices {
        let s = dev.compute_state_digest().map_err(|e| e.to_string())?;
        check(loaded.lookup_device(&dev.uuid()) == eco.store.lookup_device(&dev.uuid()), "device lookup differs")?;
        check(loaded.lookup_state(&dev.uuid(), &s) == eco.store.lookup_state(&dev.uuid(), &s), "state lookup differs")?;
    }

    let log = fs::read(&path).map_err(|e| e.to_string())?;
    let mut line = 0u64;
    let mut line_of = Vec::with_capacity(log.len());
    for &b in &log {
        line_of.push(line);
        if b == b'\n' {
            line += 1;
        }
    }
    let mut cases = 0;
    for (pos, &orig) in log.iter().enumerate() {
        for corrupt in [orig ^ 0x01, orig ^ 0x80, b'z'] {
            if corrupt == orig {
                continue;
            }
            let mut bytes = log.clone();
            bytes[pos] = corrupt;
            cases += 1;
            match Store::from_log(&bytes) {
                Err(StoreError::CorruptLog { seq, .. }) if seq == line_of[pos] => {}
                other => return Err(format!("byte {pos} -> {corrupt:#04x}: expected CorruptLog at record {}, got {other:?}", line_of[pos])),
            }
        }
    }
    Ok(format!("{records} records round-trip; {cases} single-byte corruptions each name their record"))
}

fn state_digest_agreement() -> Outcome {
    let e = Entropy::seeded(9);
    let mut eco = Ecosystem::new(e.clone()).map_err(|e| e.to_string())?;
    let mut agreed = 0;
    for i in 0..100u64 {
        let (mut dev, _) = eco.birth(&format!("device {i}")).map_err(|e| e.to_string())?;
        let image = crypto::random_bytes(&e, 16 + (i as usize % 64)).map_err(|e| e.to_string())?;
        let fw = eco.release_firmware(&image, &format!("build {i}"), true).map_err(|e| e.to_string())?;
        eco.install(&mut dev, &fw, &image, true).map_err(|e| e.to_string())?;
        let configs = i % 3;
        for seq in 1..=configs {
            let payload = crypto::random_bytes(&e, (i as usize * 7 + seq as usize) % 40).map_err(|e| e.to_string())?;
            eco.configure(&mut dev, &payload, seq * 2, true).map_err(|e| e.to_string())?;
        }
        let device_side = dev.compute_state_digest().map_err(|e| e.to_string())?;
        let store_side = eco
            .store
            .state_entries()
            .filter(|s| s.uuid == dev.uuid())
            .map(|s| s.state_digest)
            .collect::<BTreeSet<_>>();
        let view = eco.store.lookup_state(&dev.uuid(), &device_side).map_err(|e| e.to_string())?;
        check(view.expected_current, format!("combination {i}: store does not list the device state as current"))?;
        check(store_side.contains(&device_side), format!("combination {i}: digests differ"))?;
        agreed += 1;
    }
    // an unsigned change on the device side must not match any store digest
    let (mut dev, _) = eco.birth("control").map_err(|e| e.to_string())?;
    let fw = eco.release_firmware(b"ctl", "ctl", true).map_err(|e| e.to_string())?;
    eco.install(&mut dev, &fw, b"ctl", true).map_err(|e| e.to_string())?;
    eco.configure(&mut dev, b"unregistered", 1, false).map_err(|e| e.to_string())?;
    let s = dev.compute_state_digest().map_err(|e| e.to_string())?;
    check(eco.store.lookup_state(&dev.uuid(), &s).is_err(), "unregistered state matched")?;
    Ok(format!("{agreed}/100 combinations agree byte-for-byte"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 end-to-end happy path", happy_path),
        ("2 frame size bounds", size_bounds),
        ("3 crypto sizing", crypto_sizes),
        ("4 threat suite", threat_suite),
        ("5 chain verification soundness", chain_soundness),
        ("6 replay resistance", replay_resistance),
        ("7 store durability", store_durability),
        ("8 state digest agreement", state_digest_agreement),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
