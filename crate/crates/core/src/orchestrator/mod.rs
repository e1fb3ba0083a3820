//! The per-criterion assessment graph.
//!
//! For each unflagged criterion a coordinator picks panel seats, each seat
//! retrieves its top-k excerpts and gives an opinion, and a principal
//! investigator resolves disagreements. One deliberation round, no memory
//! across patients.

mod prompts;

pub use prompts::{parse_determination, parse_experts, PromptError, PromptSet};

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assessment::{Adjudication, CriterionAssessment, EvidenceRef, ExpertOpinion, Seat};
use crate::corpus::PatientId;
use crate::gateway::{AgentRole, ChatRequest, CostLedger, Gateway, GatewayError};
use crate::index::{ChunkingConfig, EmbedError, Embedder, IndexError, PatientStores, RetrievalConfig, VectorStore};
use crate::kb::KbSnapshot;
use crate::protocol::{Criterion, CriterionKind, CriterionStatus, Trial};
use prompts::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    MultiExpert,
    SingleExpert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorConfig {
    pub mode: Mode,
    pub retrieval: RetrievalConfig,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Skip the adjudicator when every opinion agrees. Outcome-preserving.
    pub skip_pi_on_unanimity: bool,
    /// Assess criteria of one trial on the rayon pool. Output order is unaffected.
    pub parallel_criteria: bool,
    pub prompts: Arc<PromptSet>,
}

impl OrchestratorConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        OrchestratorConfig {
            mode: Mode::MultiExpert,
            retrieval: RetrievalConfig::default(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            skip_pi_on_unanimity: true,
            parallel_criteria: false,
            prompts: Arc::new(PromptSet::builtin()),
        }
    }
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    mode: Mode,
    k: usize,
    model_id: &'a str,
    temperature_bits: u64,
    max_output_tokens: u32,
    skip_pi_on_unanimity: bool,
    prompt_set: &'a str,
    prompt_digest: String,
    retrieval_query: &'static str,
    embedder: &'a str,
    tokenizer: &'a str,
    chunking: ChunkingConfig,
}

#[derive(Debug, Clone)]
pub struct PanelMember {
    pub store: Arc<VectorStore>,
    pub prompt_template: String,
}

/// Seats exist only for specialties with at least one indexed chunk.
#[derive(Debug, Clone)]
pub struct ExpertPanel {
    pub patient_id: PatientId,
    pub members: BTreeMap<Seat, PanelMember>,
}

impl ExpertPanel {
    pub fn seats(&self) -> Vec<Seat> {
        self.members.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    pub seats: Vec<Seat>,
    pub fallback: bool,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("patient `{0}` has no indexed documents; no panel can be formed")]
    EmptyPanel(PatientId),
    #[error("{0} is not on the panel")]
    NotOnPanel(Seat),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("embedding the retrieval query: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Output of one (patient, trial) assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialAssessment {
    pub assessments: Vec<CriterionAssessment>,
    pub ledger: CostLedger,
}

pub struct Orchestrator<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub config: &'a OrchestratorConfig,
    pub kb: &'a KbSnapshot,
}

struct Ctx<'a> {
    patient_id: &'a str,
    trial: &'a Trial,
    criterion: &'a Criterion,
}

impl Ctx<'_> {
    fn label(&self) -> String {
        format!("{}/{}/{}", self.patient_id, self.trial.id, self.criterion.id)
    }

    fn vars(&self) -> [(&'static str, &str); 5] {
        [
            ("patient_id", self.patient_id),
            ("trial_id", &self.trial.id),
            ("criterion_id", &self.criterion.id),
            (
                "criterion_kind",
                match self.criterion.kind {
                    CriterionKind::Inclusion => "inclusion",
                    CriterionKind::Exclusion => "exclusion",
                },
            ),
            ("criterion_text", &self.criterion.text),
        ]
    }
}

fn majority(opinions: &[ExpertOpinion]) -> CriterionStatus {
    let mut counts = [0usize; 3];
    for o in opinions {
        counts[CriterionStatus::ALL.iter().position(|&s| s == o.status).unwrap()] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0);
    let winners: Vec<_> = (0..3).filter(|&i| counts[i] == max).collect();
    if max == 0 || winners.len() > 1 {
        CriterionStatus::UnableToDetermine
    } else {
        CriterionStatus::ALL[winners[0]]
    }
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        gateway: &'a Gateway,
        embedder: &'a dyn Embedder,
        config: &'a OrchestratorConfig,
        kb: &'a KbSnapshot,
    ) -> Self {
        Orchestrator {
            gateway,
            embedder,
            config,
            kb,
        }
    }

    /// Hex sha256 over every setting that can change a report.
    pub fn config_digest(&self, chunking: &ChunkingConfig) -> String {
        let fp = Fingerprint {
            mode: self.config.mode,
            k: self.config.retrieval.k,
            model_id: &self.config.model_id,
            temperature_bits: self.config.temperature.to_bits(),
            max_output_tokens: self.config.max_output_tokens,
            skip_pi_on_unanimity: self.config.skip_pi_on_unanimity,
            prompt_set: &self.config.prompts.id,
            prompt_digest: self.config.prompts.digest(),
            retrieval_query: "criterion-text",
            embedder: self.embedder.id(),
            tokenizer: self.gateway.tokenizer().id(),
            chunking: *chunking,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&fp).unwrap()))
    }

    pub fn build_panel(&self, stores: &PatientStores) -> Result<ExpertPanel, OrchestratorError> {
        let template = format!("{}:expert", self.config.prompts.id);
        let mut members = BTreeMap::new();
        match self.config.mode {
            Mode::MultiExpert => {
                for (s, store) in &stores.by_specialty {
                    if !store.is_empty() {
                        members.insert(
                            Seat::Specialist(*s),
                            PanelMember {
                                store: store.clone(),
                                prompt_template: template.clone(),
                            },
                        );
                    }
                }
            }
            Mode::SingleExpert => {
                if !stores.union.is_empty() {
                    members.insert(
                        Seat::Generalist,
                        PanelMember {
                            store: stores.union.clone(),
                            prompt_template: template,
                        },
                    );
                }
            }
        }
        if members.is_empty() {
            return Err(OrchestratorError::EmptyPanel(stores.patient_id.clone()));
        }
        Ok(ExpertPanel {
            patient_id: stores.patient_id.clone(),
            members,
        })
    }

    fn request(&self, system: String, user: String) -> ChatRequest {
        let mut r = ChatRequest::new(self.config.model_id.clone(), system, user);
        r.temperature = self.config.temperature;
        r.max_output_tokens = self.config.max_output_tokens;
        r
    }

    /// A one-seat panel needs no coordinator: any valid answer, and the
    /// fallback, both select that seat.
    fn route(&self, ctx: &Ctx<'_>, panel: &ExpertPanel, ledger: &mut CostLedger) -> Result<Routing, OrchestratorError> {
        let seats = panel.seats();
        if seats.len() == 1 {
            return Ok(Routing { seats, fallback: false });
        }
        let p = &self.config.prompts;
        let names: Vec<&str> = seats.iter().map(|s| s.role_name()).collect();
        let system = render(&p.coordinator_system, &[("experts", &names.join(", "))]);
        let user = render(&p.coordinator_user, &ctx.vars());
        let mut req = self.request(system, user);
        for attempt in 0..2 {
            if attempt == 1 {
                req.user_prompt.push_str(&p.reask_experts);
            }
            let reply = self
                .gateway
                .complete(AgentRole::Coordinator, &ctx.label(), &req, ledger)?;
            if let Some(named) = prompts::parse_experts(&reply.text) {
                let chosen: Vec<Seat> = seats
                    .iter()
                    .copied()
                    .filter(|s| matches!(s, Seat::Specialist(sp) if named.contains(sp)))
                    .collect();
                if chosen.is_empty() {
                    break;
                }
                return Ok(Routing { seats: chosen, fallback: false });
            }
        }
        Ok(Routing { seats, fallback: true })
    }

    pub fn route_criterion(
        &self,
        patient_id: &str,
        trial: &Trial,
        criterion: &Criterion,
        panel: &ExpertPanel,
        ledger: &mut CostLedger,
    ) -> Result<Routing, OrchestratorError> {
        self.route(&Ctx { patient_id, trial, criterion }, panel, ledger)
    }

    fn kb_block(&self) -> String {
        if self.kb.is_empty() {
            String::new()
        } else {
            render(
                &self.config.prompts.knowledge_base_section,
                &[("entries", &self.kb.render_for_prompt())],
            )
        }
    }

    fn opinion(
        &self,
        ctx: &Ctx<'_>,
        seat: Seat,
        panel: &ExpertPanel,
        query: &[f32],
        ledger: &mut CostLedger,
    ) -> Result<ExpertOpinion, OrchestratorError> {
        let member = panel.members.get(&seat).ok_or(OrchestratorError::NotOnPanel(seat))?;
        let hits = member.store.search(query, &self.config.retrieval)?;
        let evidence: Vec<EvidenceRef> = hits.iter().map(EvidenceRef::from).collect();
        let excerpts = evidence
            .iter()
            .enumerate()
            .map(|(i, e)| {
                format!(
                    "[{}] {}, {} (document {}, part {})\n{}",
                    i + 1,
                    e.note_type,
                    e.created_date,
                    e.doc_id,
                    e.chunk_index + 1,
                    e.text
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let p = &self.config.prompts;
        let kb = self.kb_block();
        let system = render(&p.expert_system, &[("role", seat.role_name()), ("knowledge_base", &kb)]);
        let mut vars = ctx.vars().to_vec();
        vars.push(("evidence", &excerpts));
        vars.push(("role", seat.role_name()));
        let mut req = self.request(system, render(&p.expert_user, &vars));
        for attempt in 0..2 {
            if attempt == 1 {
                req.user_prompt.push_str(&p.reask_determination);
            }
            let reply = self.gateway.complete(seat.agent_role(), &ctx.label(), &req, ledger)?;
            if let Some((explanation, status)) = parse_determination(&reply.text) {
                return Ok(ExpertOpinion { seat, explanation, status, evidence });
            }
        }
        Ok(ExpertOpinion {
            seat,
            explanation: "unparseable model output".into(),
            status: CriterionStatus::UnableToDetermine,
            evidence,
        })
    }

    pub fn assess_with_expert(
        &self,
        patient_id: &str,
        trial: &Trial,
        criterion: &Criterion,
        seat: Seat,
        panel: &ExpertPanel,
        ledger: &mut CostLedger,
    ) -> Result<ExpertOpinion, OrchestratorError> {
        let query = self.embedder.embed(&criterion.text)?;
        self.opinion(&Ctx { patient_id, trial, criterion }, seat, panel, &query, ledger)
    }

    fn adjudicate_ctx(
        &self,
        ctx: &Ctx<'_>,
        opinions: &[ExpertOpinion],
        ledger: &mut CostLedger,
    ) -> Result<(CriterionStatus, Adjudication), OrchestratorError> {
        let first = opinions.first().map(|o| o.status);
        let unanimous = first.is_some() && opinions.iter().all(|o| Some(o.status) == first);
        if unanimous && (self.config.skip_pi_on_unanimity || opinions.len() == 1) {
            return Ok((first.unwrap(), Adjudication::Unanimous));
        }
        let p = &self.config.prompts;
        let rendered = opinions
            .iter()
            .map(|o| {
                format!(
                    "Opinion of the {}:\n{}\nDetermination: {}",
                    o.seat.role_name(),
                    o.explanation,
                    o.status
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut vars = ctx.vars().to_vec();
        vars.push(("opinions", &rendered));
        let mut req = self.request(p.pi_system.clone(), render(&p.pi_user, &vars));
        for attempt in 0..2 {
            if attempt == 1 {
                req.user_prompt.push_str(&p.reask_determination);
            }
            let reply = self
                .gateway
                .complete(AgentRole::PrincipalInvestigator, &ctx.label(), &req, ledger)?;
            if let Some((narrative, status)) = parse_determination(&reply.text) {
                return Ok((status, Adjudication::PrincipalInvestigator { narrative }));
            }
        }
        Ok((majority(opinions), Adjudication::MajorityFallback))
    }

    pub fn adjudicate(
        &self,
        patient_id: &str,
        trial: &Trial,
        criterion: &Criterion,
        opinions: &[ExpertOpinion],
        ledger: &mut CostLedger,
    ) -> Result<(CriterionStatus, Adjudication), OrchestratorError> {
        self.adjudicate_ctx(&Ctx { patient_id, trial, criterion }, opinions, ledger)
    }

    fn assess_criterion(
        &self,
        ctx: &Ctx<'_>,
        panel: &ExpertPanel,
    ) -> Result<(CriterionAssessment, CostLedger), OrchestratorError> {
        let c = ctx.criterion;
        let mut ledger = CostLedger::new();
        if let Some(status) = c.resolve_flagged() {
            return Ok((
                CriterionAssessment::predetermined(c.id.clone(), c.kind, c.flag, status),
                ledger,
            ));
        }
        let routing = self.route(ctx, panel, &mut ledger)?;
        let query = self.embedder.embed(&c.text)?;
        let mut opinions = Vec::with_capacity(routing.seats.len());
        for &seat in &routing.seats {
            opinions.push(self.opinion(ctx, seat, panel, &query, &mut ledger)?);
        }
        let (final_status, adjudication) = self.adjudicate_ctx(ctx, &opinions, &mut ledger)?;
        Ok((
            CriterionAssessment {
                criterion_id: c.id.clone(),
                kind: c.kind,
                final_status,
                opinions,
                adjudication,
                routed: routing.seats,
                routing_fallback: routing.fallback,
                short_circuited: false,
            },
            ledger,
        ))
    }

    /// One assessment per criterion in protocol order, with the run's ledger
    /// merged in the same order regardless of completion order.
    pub fn assess_trial(
        &self,
        stores: &PatientStores,
        trial: &Trial,
    ) -> Result<TrialAssessment, OrchestratorError> {
        let panel = self.build_panel(stores)?;
        let one = |c: &Criterion| {
            self.assess_criterion(
                &Ctx {
                    patient_id: &stores.patient_id,
                    trial,
                    criterion: c,
                },
                &panel,
            )
        };
        let results: Vec<_> = if self.config.parallel_criteria {
            trial.criteria.par_iter().map(one).collect()
        } else {
            trial.criteria.iter().map(one).collect()
        };
        let mut assessments = Vec::with_capacity(results.len());
        let mut ledger = CostLedger::new();
        for r in results {
            let (a, l) = r?;
            assessments.push(a);
            ledger.extend(l);
        }
        Ok(TrialAssessment { assessments, ledger })
    }
}
