// Payload shapes mirrored from the session service JSON. The UI never
// invents fields: everything rendered comes from one of these.

export interface CypherEvidence {
  kind: 'cypher';
  query: string;
  table_tsv: string;
}

export interface CitationEvidence {
  kind: 'citation';
  pmid: string;
  sections?: string[];
  chunks?: string[];
  score?: number;
  rationale?: string;
}

export interface PredictionEvidence {
  kind: 'prediction';
  prediction_id: string;
  head: string;
  tail: string;
  probability: number;
  rank: number;
}

export interface SummaryFileEvidence {
  kind: 'summary_file';
  path: string;
}

export type Evidence =
  | CypherEvidence
  | CitationEvidence
  | PredictionEvidence
  | SummaryFileEvidence;

// [agent name, prompt digest, reply digest]
export type AgentTraceEntry = [string, string, string];

export interface AgentResponse {
  answer_text: string;
  evidence: Evidence[];
  agent_trace: AgentTraceEntry[];
}

export interface TurnRecord {
  kind: 'turn';
  session_id: string;
  turn: number;
  timestamp: number;
  user_input: string;
  answer_text: string;
  evidence: Evidence[];
  agent_trace: AgentTraceEntry[];
}

export interface ErrorRecord {
  kind: 'error';
  session_id: string;
  timestamp: number;
  trace_id: string;
  code: string;
  message: string;
}

export type LogRecord = TurnRecord | ErrorRecord;

export interface ExplanationEdge {
  head: string;
  tail: string;
  score: number;
}

export interface ExplanationPayload {
  target: [string, string];
  predicted_probability: number;
  edge_scores: ExplanationEdge[];
  top_k: ExplanationEdge[];
  dot: string;
}

export interface ServiceErrorBody {
  code: string;
  message: string;
  trace_id: string;
}
