//! An online marketplace spread over eight actor groups with three kinds of
//! cross-actor dependency edges:
//!
//! * adding a product to a cart registers a price replica on the cart that
//!   tracks the product's master price (`replicate`, registered at run time);
//! * each stock entry is deleted together with its product (seeded delete
//!   edges between the `product` and `stock` groups);
//! * each seller's shipment counter aggregates into the seller's running
//!   total (seeded `sum_delta` edges between `shipment` and `seller`).
//!
//! The transaction mix is browse-heavy: reading a cart, adding to a cart,
//! checking out (which empties the cart, bumps shipment counters, and writes
//! matching order and payment rows), and product maintenance (price updates
//! with occasional deletions) running on the lock-based path.

use std::collections::{BTreeMap, BTreeSet};

use keystone::deps::{DependencyRecord, DepType, FN_REPLICATE, FN_SUM_DELTA};
use keystone::pact::AccessSpec;
use keystone::runtime::{method_fn, BoxFut, GroupBuilder, MethodCtx, SeedData};
use keystone::state::ActorState;
use keystone::{AccessMode, ActorId, Decimal, Granularity, Key, TxnError, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{req_decimal, req_field, req_int, req_list, value_list};
use crate::{Lane, TxnRequest, Workload, WorkloadError};

pub const PRODUCT: &str = "product";
pub const STOCK: &str = "stock";
pub const CART: &str = "cart";
pub const CUSTOMER: &str = "customer";
pub const SELLER: &str = "seller";
pub const SHIPMENT: &str = "shipment";
pub const ORDER: &str = "order";
pub const PAYMENT: &str = "payment";

const MIN_PRICE_UNITS: i64 = Decimal::SCALE; // 1.0000
const MAX_PRICE_UNITS: i64 = 100 * Decimal::SCALE; // 100.0000
const SEED_STOCK_UNITS: i64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TxnMix {
    pub get_cart: u32,
    pub add_to_cart: u32,
    pub checkout: u32,
    pub update_product: u32,
}

impl Default for TxnMix {
    fn default() -> Self {
        TxnMix { get_cart: 30, add_to_cart: 20, checkout: 10, update_product: 40 }
    }
}

impl TxnMix {
    fn total(&self) -> u32 {
        self.get_cart + self.add_to_cart + self.checkout + self.update_product
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MarketplaceConfig {
    /// Partitions of the cart, customer, order, and payment groups.
    pub num_customers: u32,
    /// Partitions of the product and stock groups.
    pub num_products: u32,
    /// Partitions of the seller and shipment groups.
    pub num_sellers: u32,
    /// Catalog entries held by each product actor.
    pub keys_per_product: u32,
    #[serde(default)]
    pub mix: TxnMix,
    /// Every Nth product-maintenance transaction deletes the product instead
    /// of repricing it (0 disables deletions). Deletions stop once the live
    /// catalog drops to a tenth of its seeded size.
    #[serde(default = "default_delete_every")]
    pub delete_every: u32,
    /// Upper bound on items consumed by a single checkout.
    #[serde(default = "default_max_checkout_items")]
    pub max_checkout_items: u32,
}

fn default_delete_every() -> u32 {
    16
}

fn default_max_checkout_items() -> u32 {
    10
}

impl MarketplaceConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (name, v) in [
            ("numCustomers", self.num_customers),
            ("numProducts", self.num_products),
            ("numSellers", self.num_sellers),
            ("keysPerProduct", self.keys_per_product),
            ("maxCheckoutItems", self.max_checkout_items),
        ] {
            if v == 0 {
                return Err(WorkloadError::InvalidParameter(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if self.mix.total() != 100 {
            return Err(WorkloadError::InvalidParameter(format!(
                "transaction mix must sum to 100, got {}",
                self.mix.total()
            )));
        }
        Ok(())
    }

    fn catalog_size(&self) -> usize {
        self.num_products as usize * self.keys_per_product as usize
    }
}

// ---------------------------------------------------------------------------
// Actor and key layout.

pub fn product(p: u32) -> ActorId {
    ActorId::new(PRODUCT, p)
}

pub fn stock(p: u32) -> ActorId {
    ActorId::new(STOCK, p)
}

pub fn cart(c: u32) -> ActorId {
    ActorId::new(CART, c)
}

pub fn customer(c: u32) -> ActorId {
    ActorId::new(CUSTOMER, c)
}

pub fn seller(s: u32) -> ActorId {
    ActorId::new(SELLER, s)
}

pub fn shipment(s: u32) -> ActorId {
    ActorId::new(SHIPMENT, s)
}

pub fn order(c: u32) -> ActorId {
    ActorId::new(ORDER, c)
}

pub fn payment(c: u32) -> ActorId {
    ActorId::new(PAYMENT, c)
}

pub fn product_key(j: u32) -> Key {
    Key::new("prd", format!("p{j}"))
}

pub fn stock_key(j: u32) -> Key {
    Key::new("stk", format!("s{j}"))
}

/// Cart-side replica of a product's price, fed by a `replicate` edge.
pub fn replica_key(p: u32, j: u32) -> Key {
    Key::new("rep", format!("r{p}_{j}"))
}

pub fn quantity_key(p: u32, j: u32) -> Key {
    Key::new("crt", format!("q{p}_{j}"))
}

/// Seeded marker so a cart always has at least one declarable key.
pub fn cart_marker_key() -> Key {
    Key::new("crt", "init")
}

pub fn shipment_count_key() -> Key {
    Key::new("shp", "count")
}

pub fn seller_total_key() -> Key {
    Key::new("slr", "total")
}

pub fn order_key(n: u64) -> Key {
    Key::new("ord", format!("o{n}"))
}

pub fn payment_key(n: u64) -> Key {
    Key::new("pay", format!("y{n}"))
}

/// Seeded catalog price for product `j` on partition `p`: a deterministic
/// spread over 1.0000..=99.9000.
pub fn seeded_price(p: u32, j: u32) -> Decimal {
    let step = i64::from((131 * p + 17 * j) % 990);
    Decimal::from_units((10 + step) * (Decimal::SCALE / 10))
}

fn seller_for(p: u32, num_sellers: u32) -> u32 {
    p % num_sellers
}

// ---------------------------------------------------------------------------
// Request generator.

struct CartPlan {
    items: BTreeSet<(u32, u32)>,
    next_order: u64,
}

/// Deterministic request generator for the marketplace mix. Tracks which
/// products each cart holds and which catalog entries are still live so the
/// stream never re-registers an existing cart item, never reprices a deleted
/// product, and never drains the catalog completely.
pub struct Marketplace {
    cfg: MarketplaceConfig,
    rng: ChaCha8Rng,
    live: BTreeSet<(u32, u32)>,
    carts: Vec<CartPlan>,
    /// Customers this generator may touch. Concurrent generator pipelines
    /// must use disjoint slices so cart bookkeeping (registrations, order
    /// numbers) is never shared.
    customers: Vec<u32>,
    update_draws: u64,
    catalog_floor: usize,
}

impl Marketplace {
    pub fn new(cfg: MarketplaceConfig, seed: u64) -> Result<Self, WorkloadError> {
        let all: Vec<u32> = (0..cfg.num_customers).collect();
        Self::with_customers(cfg, seed, all)
    }

    /// A generator restricted to `customers`; used to shard the customer
    /// space across concurrent client pipelines.
    pub fn with_customers(
        cfg: MarketplaceConfig,
        seed: u64,
        customers: Vec<u32>,
    ) -> Result<Self, WorkloadError> {
        cfg.validate()?;
        if customers.is_empty() || customers.iter().any(|&c| c >= cfg.num_customers) {
            return Err(WorkloadError::InvalidParameter(
                "customer slice must be non-empty and within numCustomers".into(),
            ));
        }
        let live: BTreeSet<(u32, u32)> = (0..cfg.num_products)
            .flat_map(|p| (0..cfg.keys_per_product).map(move |j| (p, j)))
            .collect();
        let carts = (0..cfg.num_customers)
            .map(|_| CartPlan { items: BTreeSet::new(), next_order: 0 })
            .collect();
        let catalog_floor = (cfg.catalog_size() / 10).max(1);
        Ok(Marketplace {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            live,
            carts,
            customers,
            update_draws: 0,
            catalog_floor,
        })
    }

    pub fn config(&self) -> &MarketplaceConfig {
        &self.cfg
    }

    /// Catalog entries that have not been deleted yet.
    pub fn live_products(&self) -> usize {
        self.live.len()
    }

    fn pick_customer(&mut self) -> u32 {
        self.customers[self.rng.gen_range(0..self.customers.len())]
    }

    fn pick_live(&mut self) -> Option<(u32, u32)> {
        if self.live.is_empty() {
            return None;
        }
        let idx = self.rng.gen_range(0..self.live.len());
        self.live.iter().nth(idx).copied()
    }

    fn gen_get_cart(&mut self, granularity: Granularity, customer: Option<u32>) -> TxnRequest {
        let c = customer.unwrap_or_else(|| self.pick_customer());
        let items: Vec<(u32, u32)> = self.carts[c as usize].items.iter().copied().collect();
        let spec = match granularity {
            Granularity::ActorLevel => AccessSpec::new().actor(cart(c), 1),
            Granularity::KeyLevel => {
                let mut keys = vec![(cart_marker_key(), AccessMode::Read)];
                for &(p, j) in &items {
                    keys.push((replica_key(p, j), AccessMode::Read));
                    keys.push((quantity_key(p, j), AccessMode::Read));
                }
                AccessSpec::new().keys(cart(c), 1, keys)
            }
        };
        TxnRequest {
            lane: Lane::Scheduled,
            root: cart(c),
            method: "get_cart",
            args: Value::record([("items", item_list(&items))]),
            spec,
        }
    }

    fn gen_add_to_cart(&mut self, granularity: Granularity) -> TxnRequest {
        let c = self.pick_customer();
        let Some((p, j)) = self.pick_live() else {
            return self.gen_get_cart(granularity, Some(c));
        };
        let qty = self.rng.gen_range(1..=5i64);
        let fresh = self.carts[c as usize].items.insert((p, j));

        let spec = match granularity {
            Granularity::ActorLevel => {
                let spec = AccessSpec::new().actor(cart(c), 1);
                if fresh {
                    spec.actor(product(p), 1)
                } else {
                    spec
                }
            }
            Granularity::KeyLevel => {
                let spec = AccessSpec::new().keys(
                    cart(c),
                    1,
                    [
                        (replica_key(p, j), AccessMode::ReadWrite),
                        (quantity_key(p, j), AccessMode::ReadWrite),
                    ],
                );
                if fresh {
                    spec.keys(product(p), 1, [(product_key(j), AccessMode::ReadWrite)])
                } else {
                    spec
                }
            }
        };
        TxnRequest {
            lane: Lane::Scheduled,
            root: cart(c),
            method: "add_to_cart",
            args: Value::record([
                ("p", Value::Int(i64::from(p))),
                ("j", Value::Int(i64::from(j))),
                ("qty", Value::Int(qty)),
                ("fresh", Value::Int(i64::from(fresh))),
            ]),
            spec,
        }
    }

    fn gen_checkout(&mut self, granularity: Granularity) -> TxnRequest {
        let c = self.pick_customer();
        let plan = &mut self.carts[c as usize];
        let take: Vec<(u32, u32)> = plan
            .items
            .iter()
            .copied()
            .take(self.cfg.max_checkout_items as usize)
            .collect();
        for it in &take {
            plan.items.remove(it);
        }
        let n = plan.next_order;
        plan.next_order += 1;

        let mut by_product: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut by_seller: BTreeMap<u32, i64> = BTreeMap::new();
        for &(p, j) in &take {
            by_product.entry(p).or_default().push(j);
            *by_seller.entry(seller_for(p, self.cfg.num_sellers)).or_default() += 1;
        }

        let mut spec = match granularity {
            Granularity::ActorLevel => AccessSpec::new().actor(cart(c), 1),
            Granularity::KeyLevel => {
                let mut keys = vec![(cart_marker_key(), AccessMode::Read)];
                for &(p, j) in &take {
                    keys.push((replica_key(p, j), AccessMode::ReadWrite));
                    keys.push((quantity_key(p, j), AccessMode::ReadWrite));
                }
                AccessSpec::new().keys(cart(c), 1, keys)
            }
        };
        for (&p, js) in &by_product {
            spec = match granularity {
                Granularity::ActorLevel => spec.actor(product(p), 1),
                Granularity::KeyLevel => spec.keys(
                    product(p),
                    1,
                    js.iter().map(|&j| (product_key(j), AccessMode::ReadWrite)),
                ),
            };
        }
        for &s in by_seller.keys() {
            spec = match granularity {
                Granularity::ActorLevel => {
                    spec.actor(shipment(s), 1).actor(seller(s), 1)
                }
                Granularity::KeyLevel => spec
                    .keys(shipment(s), 1, [(shipment_count_key(), AccessMode::ReadWrite)])
                    .keys(seller(s), 1, [(seller_total_key(), AccessMode::ReadWrite)]),
            };
        }
        spec = match granularity {
            Granularity::ActorLevel => spec.actor(order(c), 1).actor(payment(c), 1),
            Granularity::KeyLevel => spec
                .keys(order(c), 1, [(order_key(n), AccessMode::ReadWrite)])
                .keys(payment(c), 1, [(payment_key(n), AccessMode::ReadWrite)]),
        };

        let shipments = value_list(by_seller.iter().map(|(&s, &count)| {
            Value::record([
                ("partition", Value::Int(i64::from(s))),
                ("n", Value::Int(count)),
            ])
        }));
        TxnRequest {
            lane: Lane::Scheduled,
            root: cart(c),
            method: "checkout",
            args: Value::record([
                ("order", Value::Int(n as i64)),
                ("items", item_list(&take)),
                ("shipments", shipments),
            ]),
            spec,
        }
    }

    fn gen_update_product(&mut self, granularity: Granularity) -> TxnRequest {
        let Some((p, j)) = self.pick_live() else {
            return self.gen_get_cart(granularity, None);
        };
        self.update_draws += 1;
        let delete = self.cfg.delete_every > 0
            && self.update_draws % u64::from(self.cfg.delete_every) == 0
            && self.live.len() > self.catalog_floor;
        if delete {
            self.live.remove(&(p, j));
            TxnRequest {
                lane: Lane::Locked,
                root: product(p),
                method: "delete_product",
                args: Value::record([("j", Value::Int(i64::from(j)))]),
                spec: AccessSpec::new(),
            }
        } else {
            let price = Decimal::from_units(
                self.rng.gen_range(MIN_PRICE_UNITS..=MAX_PRICE_UNITS),
            );
            TxnRequest {
                lane: Lane::Locked,
                root: product(p),
                method: "update_price",
                args: Value::record([
                    ("j", Value::Int(i64::from(j))),
                    ("price", Value::Decimal(price)),
                ]),
                spec: AccessSpec::new(),
            }
        }
    }
}

fn item_list(items: &[(u32, u32)]) -> Value {
    value_list(items.iter().map(|&(p, j)| {
        Value::record([("p", Value::Int(i64::from(p))), ("j", Value::Int(i64::from(j)))])
    }))
}

impl Workload for Marketplace {
    fn groups(&self) -> Vec<GroupBuilder> {
        vec![
            GroupBuilder::new(CART, self.cfg.num_customers)
                .method("get_cart", method_fn(get_cart))
                .method("add_to_cart", method_fn(add_to_cart))
                .method("checkout", method_fn(checkout)),
            GroupBuilder::new(CUSTOMER, self.cfg.num_customers),
            GroupBuilder::new(ORDER, self.cfg.num_customers)
                .method("record_order", method_fn(record_order)),
            GroupBuilder::new(PAYMENT, self.cfg.num_customers)
                .method("record_payment", method_fn(record_payment)),
            GroupBuilder::new(PRODUCT, self.cfg.num_products)
                .method("update_price", method_fn(update_price))
                .method("delete_product", method_fn(delete_product)),
            GroupBuilder::new(STOCK, self.cfg.num_products),
            GroupBuilder::new(SELLER, self.cfg.num_sellers),
            GroupBuilder::new(SHIPMENT, self.cfg.num_sellers)
                .method("add_shipments", method_fn(add_shipments)),
        ]
    }

    fn seeds(&self) -> Vec<SeedData> {
        let mut out = Vec::new();
        for p in 0..self.cfg.num_products {
            let mut prod = SeedData::new(product(p));
            let mut stk = SeedData::new(stock(p));
            for j in 0..self.cfg.keys_per_product {
                prod.kv.push((product_key(j), Value::Decimal(seeded_price(p, j))));
                stk.kv.push((stock_key(j), Value::Int(SEED_STOCK_UNITS)));
                let edge = DependencyRecord::delete(
                    product(p),
                    product_key(j),
                    stock(p),
                    stock_key(j),
                );
                prod.deps.push((product_key(j), edge.clone()));
                stk.deps.push((stock_key(j), edge));
            }
            out.push(prod);
            out.push(stk);
        }
        for s in 0..self.cfg.num_sellers {
            let edge = DependencyRecord::update(
                shipment(s),
                shipment_count_key(),
                seller(s),
                seller_total_key(),
                FN_SUM_DELTA,
            );
            let mut ship = SeedData::new(shipment(s));
            ship.kv.push((shipment_count_key(), Value::Int(0)));
            ship.deps.push((shipment_count_key(), edge.clone()));
            let mut sel = SeedData::new(seller(s));
            sel.kv.push((seller_total_key(), Value::Int(0)));
            sel.deps.push((seller_total_key(), edge));
            out.push(ship);
            out.push(sel);
        }
        for c in 0..self.cfg.num_customers {
            let mut crt = SeedData::new(cart(c));
            crt.kv.push((cart_marker_key(), Value::Int(0)));
            out.push(crt);
            let mut cus = SeedData::new(customer(c));
            cus.kv.push((Key::new("cus", "profile"), Value::text(format!("customer-{c}"))));
            out.push(cus);
        }
        out
    }

    fn next_request(&mut self, granularity: Granularity) -> TxnRequest {
        let roll = self.rng.gen_range(0..100u32);
        let m = self.cfg.mix;
        if roll < m.get_cart {
            self.gen_get_cart(granularity, None)
        } else if roll < m.get_cart + m.add_to_cart {
            self.gen_add_to_cart(granularity)
        } else if roll < m.get_cart + m.add_to_cart + m.checkout {
            self.gen_checkout(granularity)
        } else {
            self.gen_update_product(granularity)
        }
    }

    fn check_invariants(&self, states: &BTreeMap<ActorId, ActorState>) -> Vec<String> {
        verify_states(&self.cfg, states)
    }
}

// ---------------------------------------------------------------------------
// Invariant checks over a quiesced state dump.

/// Checks the three dependency invariants plus order/payment bookkeeping:
///
/// 1. every dependency record has its mirror on the other side, and every
///    live price replica equals the product's master price;
/// 2. a product entry and its stock entry exist or vanish together;
/// 3. each seller's total equals its shipment counter;
/// 4. each customer's order rows match its payment rows one for one, with
///    equal money totals.
pub fn verify_states(
    cfg: &MarketplaceConfig,
    states: &BTreeMap<ActorId, ActorState>,
) -> Vec<String> {
    let mut violations = Vec::new();

    // Record symmetry and replica freshness.
    for (actor, state) in states {
        for (key, recs) in &state.deps {
            for rec in recs {
                let leader_side = *actor == rec.leader_actor && *key == rec.leader_key;
                let (peer, peer_key) = if leader_side {
                    (&rec.follower_actor, &rec.follower_key)
                } else {
                    (&rec.leader_actor, &rec.leader_key)
                };
                let mirrored = states
                    .get(peer)
                    .map(|s| s.records(peer_key).contains(rec))
                    .unwrap_or(false);
                if !mirrored {
                    violations.push(format!(
                        "dangling dependency record at {actor}/{key}: no mirror at \
                         {peer}/{peer_key}"
                    ));
                }
                if rec.dep_type == DepType::Update
                    && rec.function_id.as_deref() == Some(FN_REPLICATE)
                    && !leader_side
                {
                    let replica = state.kv.get(key);
                    let master = states
                        .get(&rec.leader_actor)
                        .and_then(|s| s.kv.get(&rec.leader_key));
                    if replica != master {
                        violations.push(format!(
                            "stale replica at {actor}/{key}: {replica:?} vs master \
                             {master:?} at {}/{}",
                            rec.leader_actor, rec.leader_key
                        ));
                    }
                }
            }
        }
    }

    // Product/stock entries live and die together.
    for p in 0..cfg.num_products {
        let prd_ids: BTreeSet<u32> = ids_in(states, &product(p), "prd", 'p');
        let stk_ids: BTreeSet<u32> = ids_in(states, &stock(p), "stk", 's');
        if prd_ids != stk_ids {
            violations.push(format!(
                "partition {p}: product entries {prd_ids:?} disagree with stock \
                 entries {stk_ids:?}"
            ));
        }
    }

    // Seller totals mirror shipment counters AND a from-scratch recount of
    // the per-seller item counts recorded on every order row.
    let mut recount: BTreeMap<u32, i64> = (0..cfg.num_sellers).map(|s| (s, 0)).collect();
    for c in 0..cfg.num_customers {
        for (_, row) in rows(states, &order(c), "ord") {
            let Some(sellers) = row.field("sellers").and_then(crate::list_items) else {
                violations.push(format!(
                    "customer {c}: an order row lacks its seller breakdown"
                ));
                continue;
            };
            for entry in sellers {
                let s = entry.field("partition").and_then(Value::as_int).unwrap_or(-1);
                let n = entry.field("n").and_then(Value::as_int).unwrap_or(0);
                match u32::try_from(s).ok().and_then(|s| recount.get_mut(&s)) {
                    Some(slot) => *slot += n,
                    None => violations.push(format!(
                        "customer {c}: order row names unknown seller {s}"
                    )),
                }
            }
        }
    }
    for s in 0..cfg.num_sellers {
        let shipped = int_at(states, &shipment(s), &shipment_count_key());
        let total = int_at(states, &seller(s), &seller_total_key());
        if shipped != total {
            violations.push(format!(
                "seller {s}: total {total:?} diverged from shipment counter {shipped:?}"
            ));
        }
        if total != Some(recount[&s]) {
            violations.push(format!(
                "seller {s}: total {total:?} diverged from the order-row recount {}",
                recount[&s]
            ));
        }
    }

    // Orders and payments pair up with equal money.
    for c in 0..cfg.num_customers {
        let orders = rows(states, &order(c), "ord");
        let payments = rows(states, &payment(c), "pay");
        let order_ids: BTreeSet<&str> =
            orders.iter().map(|(id, _)| id.trim_start_matches('o')).collect();
        let payment_ids: BTreeSet<&str> =
            payments.iter().map(|(id, _)| id.trim_start_matches('y')).collect();
        if order_ids != payment_ids {
            violations.push(format!(
                "customer {c}: orders {order_ids:?} disagree with payments {payment_ids:?}"
            ));
        }
        let order_total: i128 = orders
            .iter()
            .filter_map(|(_, v)| v.field("total").and_then(Value::as_decimal))
            .map(|d| i128::from(d.units()))
            .sum();
        let payment_total: i128 = payments
            .iter()
            .filter_map(|(_, v)| v.field("amount").and_then(Value::as_decimal))
            .map(|d| i128::from(d.units()))
            .sum();
        if order_total != payment_total {
            violations.push(format!(
                "customer {c}: order money {order_total} != payment money {payment_total}"
            ));
        }
    }

    violations
}

fn ids_in(
    states: &BTreeMap<ActorId, ActorState>,
    actor: &ActorId,
    ns: &str,
    prefix: char,
) -> BTreeSet<u32> {
    states
        .get(actor)
        .map(|s| {
            s.kv.keys()
                .filter(|k| k.namespace == ns)
                .filter_map(|k| k.id.trim_start_matches(prefix).parse().ok())
                .collect()
        })
        .unwrap_or_default()
}

fn int_at(
    states: &BTreeMap<ActorId, ActorState>,
    actor: &ActorId,
    key: &Key,
) -> Option<i64> {
    states.get(actor).and_then(|s| s.kv.get(key)).and_then(Value::as_int)
}

fn rows<'a>(
    states: &'a BTreeMap<ActorId, ActorState>,
    actor: &ActorId,
    ns: &str,
) -> Vec<(&'a str, &'a Value)> {
    states
        .get(actor)
        .map(|s| {
            s.kv.iter()
                .filter(|(k, _)| k.namespace == ns)
                .map(|(k, v)| (k.id.as_str(), v))
                .collect()
        })
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Method bodies.

/// Sums `price * quantity` over the cart entries named in `items`. Entries
/// whose replica or quantity is missing (the product vanished before the
/// price feed was established) count as zero.
fn get_cart<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let items = parse_items(&args)?;
        let mut total = Decimal::ZERO;
        for (p, j) in items {
            let line = line_total(ctx, p, j).await?;
            total = total
                .checked_add(line)
                .ok_or_else(|| TxnError::user("cart total overflow"))?;
        }
        Ok(Value::Decimal(total))
    })
}

async fn line_total(ctx: &mut MethodCtx, p: u32, j: u32) -> Result<Decimal, TxnError> {
    let qty = ctx
        .get(&quantity_key(p, j))
        .await?
        .and_then(|v| v.as_int())
        .unwrap_or(0);
    let price = ctx
        .get(&replica_key(p, j))
        .await?
        .and_then(|v| v.as_decimal())
        .unwrap_or(Decimal::ZERO);
    let units = price
        .units()
        .checked_mul(qty)
        .ok_or_else(|| TxnError::user("line total overflow"))?;
    Ok(Decimal::from_units(units))
}

/// Adds `qty` of one product to the cart. On first add it registers a
/// replica of the product's price on this cart; if the product has vanished
/// in the meantime (or the edge already exists), the cart entry is kept
/// without a live price feed and the replica simply stays absent or frozen.
fn add_to_cart<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let p = req_int(&args, "p")? as u32;
        let j = req_int(&args, "j")? as u32;
        let qty = req_int(&args, "qty")?;
        if req_int(&args, "fresh")? != 0 {
            let me = ctx.current_actor().clone();
            let record = DependencyRecord::update(
                product(p),
                product_key(j),
                me,
                replica_key(p, j),
                FN_REPLICATE,
            );
            match ctx.register_dependency(record).await {
                Ok(()) | Err(TxnError::Dep(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let qkey = quantity_key(p, j);
        let current = ctx.get(&qkey).await?.and_then(|v| v.as_int()).unwrap_or(0);
        let next = current
            .checked_add(qty)
            .ok_or_else(|| TxnError::user("cart quantity overflow"))?;
        ctx.put(qkey, Value::Int(next)).await?;
        Ok(Value::Int(next))
    })
}

/// Empties the named cart entries, bumps the shipment counter of every
/// involved seller, and writes matching order and payment rows. Deleting a
/// replica also retires its price-feed edge at the product.
fn checkout<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let order_no = req_int(&args, "order")? as u64;
        let items = parse_items(&args)?;
        let shipments: Vec<(u32, i64)> = req_list(&args, "shipments")?
            .into_iter()
            .map(|s| Ok((req_int(s, "partition")? as u32, req_int(s, "n")?)))
            .collect::<Result<_, TxnError>>()?;

        let mut total = Decimal::ZERO;
        let mut item_count = 0i64;
        for &(p, j) in &items {
            let line = line_total(ctx, p, j).await?;
            total = total
                .checked_add(line)
                .ok_or_else(|| TxnError::user("order total overflow"))?;
            item_count += 1;
            ctx.delete(&replica_key(p, j)).await?;
            ctx.delete(&quantity_key(p, j)).await?;
        }
        for &(s, n) in &shipments {
            ctx.call_actor(
                shipment(s),
                "add_shipments",
                Value::record([("n", Value::Int(n))]),
            )
            .await?;
        }
        // The order row keeps its per-seller item counts so an audit can
        // recount seller totals from scratch.
        let sellers = value_list(shipments.iter().map(|&(s, n)| {
            Value::record([
                ("partition", Value::Int(i64::from(s))),
                ("n", Value::Int(n)),
            ])
        }));
        let c = ctx.current_actor().partition;
        ctx.call_actor(
            order(c),
            "record_order",
            Value::record([
                ("order", Value::Int(order_no as i64)),
                ("total", Value::Decimal(total)),
                ("items", Value::Int(item_count)),
                ("sellers", sellers),
            ]),
        )
        .await?;
        ctx.call_actor(
            payment(c),
            "record_payment",
            Value::record([
                ("order", Value::Int(order_no as i64)),
                ("amount", Value::Decimal(total)),
            ]),
        )
        .await?;
        Ok(Value::Decimal(total))
    })
}

/// Reprices a product; propagates to every cart replica. A vanished product
/// is left deleted rather than resurrected.
fn update_price<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let j = req_int(&args, "j")? as u32;
        let price = req_decimal(&args, "price")?;
        let key = product_key(j);
        if ctx.get(&key).await?.is_none() {
            return Ok(Value::Int(0));
        }
        ctx.put(key, Value::Decimal(price)).await?;
        Ok(Value::Int(1))
    })
}

/// Deletes a product; the seeded delete edge removes its stock entry and
/// every cart replica edge is retired.
fn delete_product<'a>(
    ctx: &'a mut MethodCtx,
    args: Value,
) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let j = req_int(&args, "j")? as u32;
        let removed = ctx.delete(&product_key(j)).await?;
        Ok(Value::Int(i64::from(removed)))
    })
}

/// Bumps this partition's shipment counter; the seeded `sum_delta` edge
/// carries the increment into the seller's total.
fn add_shipments<'a>(
    ctx: &'a mut MethodCtx,
    args: Value,
) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let n = req_int(&args, "n")?;
        let key = shipment_count_key();
        let current = ctx.get(&key).await?.and_then(|v| v.as_int()).unwrap_or(0);
        ctx.put(key, Value::Int(current + n)).await?;
        Ok(Value::Int(current + n))
    })
}

fn record_order<'a>(ctx: &'a mut MethodCtx, args: Value) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let n = req_int(&args, "order")? as u64;
        let total = req_decimal(&args, "total")?;
        let items = req_int(&args, "items")?;
        let sellers = req_field(&args, "sellers")?.clone();
        ctx.put(
            order_key(n),
            Value::record([
                ("total", Value::Decimal(total)),
                ("items", Value::Int(items)),
                ("sellers", sellers),
            ]),
        )
        .await?;
        Ok(Value::Int(0))
    })
}

fn record_payment<'a>(
    ctx: &'a mut MethodCtx,
    args: Value,
) -> BoxFut<'a, Result<Value, TxnError>> {
    Box::pin(async move {
        let n = req_int(&args, "order")? as u64;
        let amount = req_decimal(&args, "amount")?;
        ctx.put(payment_key(n), Value::record([("amount", Value::Decimal(amount))]))
            .await?;
        Ok(Value::Int(0))
    })
}

fn parse_items(args: &Value) -> Result<Vec<(u32, u32)>, TxnError> {
    req_list(args, "items")?
        .into_iter()
        .map(|it| Ok((req_int(it, "p")? as u32, req_int(it, "j")? as u32)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MarketplaceConfig {
        MarketplaceConfig {
            num_customers: 4,
            num_products: 4,
            num_sellers: 2,
            keys_per_product: 50,
            mix: TxnMix::default(),
            delete_every: 16,
            max_checkout_items: 10,
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        let mut c = cfg();
        c.num_sellers = 0;
        assert!(matches!(c.validate(), Err(WorkloadError::InvalidParameter(_))));
        let mut c = cfg();
        c.mix.get_cart = 31;
        assert!(matches!(c.validate(), Err(WorkloadError::InvalidParameter(_))));
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn mix_frequencies_hold_over_ten_thousand_draws() {
        let mut wl = Marketplace::new(cfg(), 5).unwrap();
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for _ in 0..10_000 {
            let req = wl.next_request(Granularity::ActorLevel);
            let bucket = match req.method {
                "update_price" | "delete_product" => "update_product",
                other => other,
            };
            *counts.entry(bucket).or_default() += 1;
        }
        let expect = [
            ("get_cart", 3000i64),
            ("add_to_cart", 2000),
            ("checkout", 1000),
            ("update_product", 4000),
        ];
        for (name, want) in expect {
            let got = i64::from(*counts.get(name).unwrap_or(&0));
            assert!(
                (got - want).abs() <= 150,
                "{name}: {got} draws strayed more than 1.5% from {want}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let mut a = Marketplace::new(cfg(), 9).unwrap();
        let mut b = Marketplace::new(cfg(), 9).unwrap();
        for _ in 0..50 {
            let ra = a.next_request(Granularity::KeyLevel);
            let rb = b.next_request(Granularity::KeyLevel);
            assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
        }
    }

    #[test]
    fn carts_fill_then_empty_and_orders_get_distinct_numbers() {
        let mut wl = Marketplace::new(cfg(), 21).unwrap();
        // Drive until at least one checkout with items has been generated.
        let mut saw_loaded_checkout = false;
        for _ in 0..2_000 {
            let req = wl.next_request(Granularity::ActorLevel);
            if req.method == "checkout" {
                let items = crate::list_items(req.args.field("items").unwrap()).unwrap();
                let c = req.root.partition as usize;
                if !items.is_empty() {
                    saw_loaded_checkout = true;
                    // Everything the checkout took must be gone from the plan.
                    for it in items {
                        let p = it.field("p").unwrap().as_int().unwrap() as u32;
                        let j = it.field("j").unwrap().as_int().unwrap() as u32;
                        assert!(!wl.carts[c].items.contains(&(p, j)));
                    }
                }
            }
        }
        assert!(saw_loaded_checkout);
        for plan in &wl.carts {
            assert!(plan.next_order >= 1, "every cart should have checked out by now");
        }
    }

    #[test]
    fn deletions_respect_the_catalog_floor() {
        let mut c = cfg();
        c.num_products = 1;
        c.keys_per_product = 5; // floor is max(1, 5/10) = 1
        c.delete_every = 1; // every maintenance draw tries to delete
        let mut wl = Marketplace::new(c, 3).unwrap();
        for _ in 0..5_000 {
            wl.next_request(Granularity::ActorLevel);
        }
        assert_eq!(wl.live_products(), 1, "floor must stop the last deletion");
    }

    #[test]
    fn deleted_products_stop_appearing_in_maintenance_and_adds() {
        let mut wl = Marketplace::new(cfg(), 13).unwrap();
        let mut deleted: BTreeSet<(u32, u32)> = BTreeSet::new();
        for _ in 0..5_000 {
            let req = wl.next_request(Granularity::ActorLevel);
            let p = req.root.partition;
            match req.method {
                "delete_product" => {
                    let j = req.args.field("j").unwrap().as_int().unwrap() as u32;
                    assert!(deleted.insert((p, j)), "a product may only be deleted once");
                }
                "update_price" => {
                    let j = req.args.field("j").unwrap().as_int().unwrap() as u32;
                    assert!(!deleted.contains(&(p, j)), "repriced a deleted product");
                }
                "add_to_cart" => {
                    let pp = req.args.field("p").unwrap().as_int().unwrap() as u32;
                    let j = req.args.field("j").unwrap().as_int().unwrap() as u32;
                    assert!(!deleted.contains(&(pp, j)), "added a deleted product");
                }
                _ => {}
            }
        }
        assert!(!deleted.is_empty(), "the stream should contain deletions");
    }

    #[test]
    fn seeds_wire_both_sides_of_every_edge() {
        let wl = Marketplace::new(cfg(), 1).unwrap();
        let seeds = wl.seeds();
        // 2 per product partition + 2 per seller partition + 2 per customer.
        assert_eq!(seeds.len(), (4 + 2 + 4) * 2);

        let by_actor: BTreeMap<ActorId, &SeedData> =
            seeds.iter().map(|s| (s.actor.clone(), s)).collect();
        for p in 0..4 {
            let prod = by_actor[&product(p)];
            let stk = by_actor[&stock(p)];
            assert_eq!(prod.kv.len(), 50);
            assert_eq!(stk.kv.len(), 50);
            assert_eq!(prod.deps.len(), 50);
            for (key, rec) in &prod.deps {
                assert_eq!(rec.dep_type, DepType::Delete);
                assert_eq!(&rec.leader_key, key);
                let mirrored = stk
                    .deps
                    .iter()
                    .any(|(k, r)| k == &rec.follower_key && r == rec);
                assert!(mirrored, "stock side must carry the same delete edge");
            }
            for (_, v) in &prod.kv {
                let price = v.as_decimal().unwrap();
                assert!(price >= Decimal::from_units(Decimal::SCALE));
                assert!(price <= Decimal::from_units(100 * Decimal::SCALE));
            }
        }
        for s in 0..2 {
            let ship = by_actor[&shipment(s)];
            let sel = by_actor[&seller(s)];
            let (_, rec) = &ship.deps[0];
            assert_eq!(rec.function_id.as_deref(), Some(FN_SUM_DELTA));
            assert_eq!(sel.deps[0].1, *rec);
            assert_eq!(ship.kv[0].1.as_int(), Some(0));
            assert_eq!(sel.kv[0].1.as_int(), Some(0));
        }
        for c in 0..4 {
            assert_eq!(by_actor[&cart(c)].kv[0].0, cart_marker_key());
            assert!(by_actor.contains_key(&customer(c)));
        }
    }

    #[test]
    fn key_level_checkout_declares_every_touched_actor_and_key() {
        let mut wl = Marketplace::new(cfg(), 2).unwrap();
        let mut checked = false;
        for _ in 0..3_000 {
            let req = wl.next_request(Granularity::KeyLevel);
            if req.method != "checkout" {
                continue;
            }
            let items = crate::list_items(req.args.field("items").unwrap()).unwrap();
            if items.is_empty() {
                continue;
            }
            checked = true;
            let c = req.root.partition;
            let n = req.args.field("order").unwrap().as_int().unwrap() as u64;

            let cart_keys = req.spec.get(&cart(c)).unwrap().keys.as_ref().unwrap();
            assert!(cart_keys.contains_key(&cart_marker_key()));
            for it in &items {
                let p = it.field("p").unwrap().as_int().unwrap() as u32;
                let j = it.field("j").unwrap().as_int().unwrap() as u32;
                assert!(cart_keys.contains_key(&replica_key(p, j)));
                assert!(cart_keys.contains_key(&quantity_key(p, j)));
                let prod_keys =
                    req.spec.get(&product(p)).unwrap().keys.as_ref().unwrap();
                assert!(prod_keys.contains_key(&product_key(j)));
                let s = seller_for(p, 2);
                assert!(req.spec.get(&shipment(s)).is_some());
                assert!(req.spec.get(&seller(s)).is_some());
            }
            let order_keys = req.spec.get(&order(c)).unwrap().keys.as_ref().unwrap();
            assert!(order_keys.contains_key(&order_key(n)));
            let pay_keys = req.spec.get(&payment(c)).unwrap().keys.as_ref().unwrap();
            assert!(pay_keys.contains_key(&payment_key(n)));
        }
        assert!(checked, "the stream should contain a non-empty checkout");
    }

    #[test]
    fn customer_slices_confine_cart_traffic() {
        let mut a = Marketplace::with_customers(cfg(), 7, vec![0, 2]).unwrap();
        let mut b = Marketplace::with_customers(cfg(), 8, vec![1, 3]).unwrap();
        for _ in 0..500 {
            let ra = a.next_request(Granularity::ActorLevel);
            let rb = b.next_request(Granularity::ActorLevel);
            for (req, allowed) in [(&ra, [0u32, 2]), (&rb, [1u32, 3])] {
                if req.root.group == CART {
                    assert!(allowed.contains(&req.root.partition));
                }
            }
        }
        assert!(Marketplace::with_customers(cfg(), 1, vec![]).is_err());
        assert!(Marketplace::with_customers(cfg(), 1, vec![4]).is_err());
    }

    #[test]
    fn maintenance_runs_on_the_locked_lane_and_carts_on_the_scheduled_lane() {
        let mut wl = Marketplace::new(cfg(), 4).unwrap();
        for _ in 0..1_000 {
            let req = wl.next_request(Granularity::ActorLevel);
            match req.method {
                "update_price" | "delete_product" => {
                    assert_eq!(req.lane, Lane::Locked);
                    assert!(req.spec.is_empty());
                    assert_eq!(req.root.group, PRODUCT);
                }
                _ => {
                    assert_eq!(req.lane, Lane::Scheduled);
                    assert!(!req.spec.is_empty());
                    assert_eq!(req.root.group, CART);
                }
            }
        }
    }
}
