//! Schnorr-based VRF (sr25519) with deterministic proofs.
//!
//! Proof nonces come from a ChaCha stream keyed by the secret seed and the
//! input, so `eval` is a pure function of (key, input).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use schnorrkel::context::attach_rng;
use schnorrkel::vrf::{VRFPreOut, VRFProof};
use schnorrkel::{signing_context, ExpansionMode, Keypair, MiniSecretKey, PublicKey};
use sha2::{Digest, Sha256};

const CONTEXT: &[u8] = b"chainscale-sortition";
const EXTRA: &[u8] = b"chainscale-proof";
const OUTPUT_LABEL: &[u8] = b"rnd";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrfOutput {
    /// Uniform 64-bit draw derived from the VRF output.
    pub value: u64,
    pub preout: [u8; 32],
    pub proof: [u8; 64],
}

pub struct VrfKeypair {
    kp: Keypair,
    nonce_key: [u8; 32],
}

impl std::fmt::Debug for VrfKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VrfKeypair({:02x?})", &self.public()[..4])
    }
}

impl VrfKeypair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let mini = MiniSecretKey::from_bytes(&seed).expect("32-byte mini secret");
        let nonce_key: [u8; 32] = Sha256::new()
            .chain_update(b"nonce")
            .chain_update(seed)
            .finalize()
            .into();
        VrfKeypair {
            kp: mini.expand_to_keypair(ExpansionMode::Ed25519),
            nonce_key,
        }
    }

    pub fn public(&self) -> [u8; 32] {
        self.kp.public.to_bytes()
    }

    pub fn eval(&self, input: &[u8]) -> VrfOutput {
        let nonce: [u8; 32] = Sha256::new()
            .chain_update(self.nonce_key)
            .chain_update(input)
            .finalize()
            .into();
        let ctx = signing_context(CONTEXT);
        let extra = attach_rng(signing_context(EXTRA).bytes(b""), ChaCha20Rng::from_seed(nonce));
        let (io, proof, _) = self.kp.vrf_sign_extra(ctx.bytes(input), extra);
        let bytes: [u8; 8] = io.make_bytes(OUTPUT_LABEL);
        VrfOutput {
            value: u64::from_le_bytes(bytes),
            preout: io.to_preout().to_bytes(),
            proof: proof.to_bytes(),
        }
    }
}

pub fn vrf_verify(pk: &[u8; 32], input: &[u8], out: &VrfOutput) -> bool {
    let Ok(public) = PublicKey::from_bytes(pk) else {
        return false;
    };
    let Ok(preout) = VRFPreOut::from_bytes(&out.preout) else {
        return false;
    };
    let Ok(proof) = VRFProof::from_bytes(&out.proof) else {
        return false;
    };
    let ctx = signing_context(CONTEXT);
    match public.vrf_verify_extra(ctx.bytes(input), &preout, &proof, signing_context(EXTRA).bytes(b"")) {
        Ok((io, _)) => u64::from_le_bytes(io.make_bytes(OUTPUT_LABEL)) == out.value,
        Err(_) => false,
    }
}
