import type {
  AgentResponse,
  CitationEvidence,
  CypherEvidence,
  Evidence,
  PredictionEvidence,
  SummaryFileEvidence,
} from './types.js';

export interface TurnData {
  userText: string;
  response: AgentResponse;
}

export interface TurnOptions {
  // called for each prediction panel so the page can fetch and render
  // the explanation into the provided slot
  onPrediction?: (evidence: PredictionEvidence, slot: HTMLElement) => void;
}

function cypherPanel(evidence: CypherEvidence): HTMLElement {
  const panel = document.createElement('div');
  panel.className = 'evidence-panel cypher';

  const button = document.createElement('button');
  button.type = 'button';
  button.className = 'copy-btn';
  button.textContent = 'copy';
  button.addEventListener('click', () => {
    void navigator.clipboard?.writeText(evidence.query);
  });
  panel.appendChild(button);

  const block = document.createElement('pre');
  block.className = 'cypher-block';
  block.textContent = evidence.query;
  panel.appendChild(block);

  const lines = evidence.table_tsv.split('\n').filter((l) => l.length > 0);
  if (lines.length > 0) {
    const table = document.createElement('table');
    table.className = 'result-table';
    const head = table.createTHead().insertRow();
    for (const column of lines[0].split('\t')) {
      const th = document.createElement('th');
      th.textContent = column;
      head.appendChild(th);
    }
    const body = table.createTBody();
    for (const line of lines.slice(1)) {
      const row = body.insertRow();
      for (const value of line.split('\t')) {
        row.insertCell().textContent = value;
      }
    }
    panel.appendChild(table);
  }
  return panel;
}

// Renders only the fields the evidence actually carries; a citation is
// never padded with placeholder values.
function citationItem(evidence: CitationEvidence): HTMLElement {
  const item = document.createElement('li');
  item.className = 'citation';

  const pmid = document.createElement('span');
  pmid.className = 'pmid';
  pmid.textContent = `PMID ${evidence.pmid}`;
  item.appendChild(pmid);

  if (evidence.sections && evidence.sections.length > 0) {
    const sections = document.createElement('span');
    sections.className = 'sections';
    sections.textContent = evidence.sections.join(', ');
    item.appendChild(sections);
  }

  if (evidence.score !== undefined) {
    const score = document.createElement('span');
    score.className = 'score';
    score.textContent = String(evidence.score);
    item.appendChild(score);
  }

  if (evidence.rationale !== undefined) {
    const snippet = document.createElement('span');
    snippet.className = 'snippet';
    snippet.textContent = evidence.rationale;
    item.appendChild(snippet);
  }

  if (evidence.chunks && evidence.chunks.length > 0) {
    const refs = document.createElement('ul');
    refs.className = 'chunk-refs';
    for (const chunk of evidence.chunks) {
      const ref = document.createElement('li');
      ref.textContent = chunk;
      refs.appendChild(ref);
    }
    item.appendChild(refs);
  }
  return item;
}

function predictionPanel(
  evidence: PredictionEvidence,
  options: TurnOptions,
): HTMLElement {
  const panel = document.createElement('div');
  panel.className = 'evidence-panel prediction';
  panel.dataset.predictionId = evidence.prediction_id;

  const pair = document.createElement('span');
  pair.className = 'pair';
  pair.textContent = `${evidence.head} -- ${evidence.tail}`;
  panel.appendChild(pair);

  const rank = document.createElement('span');
  rank.className = 'rank';
  rank.textContent = `#${String(evidence.rank)}`;
  panel.appendChild(rank);

  const probability = document.createElement('span');
  probability.className = 'probability';
  probability.textContent = String(evidence.probability);
  panel.appendChild(probability);

  const slot = document.createElement('div');
  slot.className = 'explanation-slot';
  panel.appendChild(slot);
  options.onPrediction?.(evidence, slot);
  return panel;
}

function summaryPanel(
  evidence: SummaryFileEvidence,
  answerText: string,
): HTMLElement {
  const panel = document.createElement('div');
  panel.className = 'evidence-panel summary';

  const link = document.createElement('a');
  link.className = 'download';
  link.textContent = `download ${evidence.path}`;
  link.setAttribute('download', evidence.path);
  link.setAttribute(
    'href',
    'data:text/plain;charset=utf-8,' + encodeURIComponent(answerText),
  );
  panel.appendChild(link);
  return panel;
}

function evidencePanel(
  evidence: Evidence,
  answerText: string,
  options: TurnOptions,
): HTMLElement | null {
  switch (evidence.kind) {
    case 'cypher':
      return cypherPanel(evidence);
    case 'prediction':
      return predictionPanel(evidence, options);
    case 'summary_file':
      return summaryPanel(evidence, answerText);
    default:
      return null;
  }
}

/**
 * Append one chat turn (user text, answer text, evidence panels) to
 * `container` and return the turn element.
 */
export function renderTurn(
  container: HTMLElement,
  data: TurnData,
  options: TurnOptions = {},
): HTMLElement {
  const turn = document.createElement('div');
  turn.className = 'turn';

  const user = document.createElement('div');
  user.className = 'user-text';
  user.textContent = data.userText;
  turn.appendChild(user);

  const answer = document.createElement('div');
  answer.className = 'answer-text';
  answer.textContent = data.response.answer_text;
  turn.appendChild(answer);

  const citations = data.response.evidence.filter(
    (e): e is CitationEvidence => e.kind === 'citation',
  );
  if (citations.length > 0) {
    const list = document.createElement('ul');
    list.className = 'evidence-panel citations';
    for (const citation of citations) {
      list.appendChild(citationItem(citation));
    }
    turn.appendChild(list);
  }

  for (const evidence of data.response.evidence) {
    const panel = evidencePanel(evidence, data.response.answer_text, options);
    if (panel) turn.appendChild(panel);
  }

  if (data.response.agent_trace.length > 0) {
    const agents = document.createElement('div');
    agents.className = 'agent-trace';
    const names = data.response.agent_trace.map((entry) => entry[0]);
    agents.textContent = `agents: ${[...new Set(names)].join(', ')}`;
    turn.appendChild(agents);
  }

  container.appendChild(turn);
  return turn;
}
