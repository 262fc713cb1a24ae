//! Proptest strategies for the eduction data model and wire requests.

use eduction_core::model::{Context, Demand, DemandKind, DemandSignature, DemandState, KindSet, Value};
use eduction_core::transport::{Request, MAX_AWAIT_MS};
use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

pub fn identifier() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,7}"
}

/// Finite floats, including signed zeros and subnormals.
pub fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(f64::MAX),
    ]
}

pub fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i64>().prop_map(Value::Int),
        finite_f64().prop_map(Value::Float),
        any::<bool>().prop_map(Value::Bool),
        ".{0,24}".prop_map(Value::Str),
        vec(finite_f64(), 0..12).prop_map(Value::FloatArray),
    ]
}

pub fn context() -> impl Strategy<Value = Context> {
    btree_map(identifier(), any::<i64>(), 0..5).prop_map(|m| Context::from_pairs(m).expect("distinct identifiers"))
}

pub fn kind() -> impl Strategy<Value = DemandKind> {
    prop::sample::select(DemandKind::ALL.to_vec())
}

/// Non-empty kind sets.
pub fn kind_set() -> impl Strategy<Value = KindSet> {
    (1u8..16).prop_map(|b| KindSet::from_bits(b).expect("low bits"))
}

/// Well-formed signatures of every kind.
pub fn signature() -> impl Strategy<Value = DemandSignature> {
    signature_of(kind())
}

/// Signatures the warehouse may hold: anything but SYSTEM.
pub fn stored_signature() -> impl Strategy<Value = DemandSignature> {
    let kinds: Vec<_> = DemandKind::ALL.into_iter().filter(|k| *k != DemandKind::System).collect();
    signature_of(prop::sample::select(kinds))
}

fn signature_of(kinds: impl Strategy<Value = DemandKind>) -> impl Strategy<Value = DemandSignature> {
    (identifier(), identifier(), kinds, context(), vec(value(), 0..4)).prop_map(
        |(program_id, name, kind, context, args)| match kind {
            DemandKind::Procedural => DemandSignature::procedural(&program_id, &name, args),
            DemandKind::System => DemandSignature { program_id, name, context, kind, args },
            _ => DemandSignature { program_id, name, context, kind, args: vec![] },
        },
    )
}

pub fn demand() -> impl Strategy<Value = Demand> {
    demand_of(signature())
}

pub fn stored_demand() -> impl Strategy<Value = Demand> {
    demand_of(stored_signature())
}

fn demand_of(sigs: impl Strategy<Value = DemandSignature>) -> impl Strategy<Value = Demand> {
    (sigs, 0u8..3, value(), any::<u64>(), any::<u32>()).prop_map(|(signature, state, v, lease, attempts)| {
        let mut d = match state {
            0 => Demand::pending(signature),
            1 => Demand { state: DemandState::InProcess, ..Demand::pending(signature) },
            _ => Demand::computed(signature, v),
        };
        if d.state == DemandState::InProcess {
            d.lease_expiry = Some(lease);
        }
        d.attempts = attempts;
        d
    })
}

/// Any request a client may send.
pub fn request() -> impl Strategy<Value = Request> {
    prop_oneof![
        stored_demand().prop_map(Request::Deposit),
        (identifier(), kind_set(), any::<u64>()).prop_map(|(worker, kinds, lease_ms)| Request::Claim {
            worker,
            kinds,
            lease_ms
        }),
        (stored_signature(), value(), identifier()).prop_map(|(signature, value, worker)| Request::Fulfill {
            signature,
            value,
            worker
        }),
        stored_signature().prop_map(Request::Fetch),
        (stored_signature(), 0..=MAX_AWAIT_MS)
            .prop_map(|(signature, timeout_ms)| Request::Await { signature, timeout_ms }),
        (identifier(), vec(any::<u8>(), 0..64)).prop_map(|(id, bytes)| Request::ResourcePut { id, bytes }),
        identifier().prop_map(|id| Request::ResourceGet { id }),
        (identifier(), vec(value(), 0..3)).prop_map(|(name, args)| Request::System(DemandSignature {
            program_id: "gmt".into(),
            name,
            context: Context::empty(),
            kind: DemandKind::System,
            args,
        })),
        Just(Request::Stats),
    ]
}
