import { ApiError, type SessionApi } from './api.js';
import { renderExplanation } from './explanation.js';
import { renderTurn } from './turnView.js';
import type { PredictionEvidence } from './types.js';

const KEYWORDS = ['query', 'predict', 'search', 'summarize'] as const;

export function readSessionFromHash(hash: string): string | null {
  const match = /^#s=([A-Za-z0-9_-]+)$/.exec(hash);
  return match ? match[1] : null;
}

/**
 * Page controller. Owns the transcript, the input row with the four
 * keyword buttons, and the error banner. One turn in flight at a time:
 * the input row is disabled until the server replies.
 */
export class ChatApp {
  sessionId = '';
  inFlight = false;

  private transcript!: HTMLElement;
  private banner!: HTMLElement;
  private input!: HTMLInputElement;
  private controls: HTMLButtonElement[] = [];
  private header!: HTMLElement;

  constructor(
    private root: HTMLElement,
    private client: SessionApi,
  ) {}

  async start(): Promise<void> {
    this.buildDom();
    try {
      await this.resolveSession();
    } catch (err) {
      this.handleTurnError(err);
    }
  }

  private buildDom(): void {
    this.root.textContent = '';

    this.header = document.createElement('div');
    this.header.className = 'session-header';
    this.root.appendChild(this.header);

    this.banner = document.createElement('div');
    this.banner.className = 'banner';
    this.banner.hidden = true;
    this.root.appendChild(this.banner);

    this.transcript = document.createElement('div');
    this.transcript.className = 'transcript';
    this.root.appendChild(this.transcript);

    const form = document.createElement('form');
    form.className = 'input-row';
    form.addEventListener('submit', (event) => {
      event.preventDefault();
      void this.sendTurn(this.input.value);
    });

    for (const keyword of KEYWORDS) {
      const button = document.createElement('button');
      button.type = 'button';
      button.className = 'quick-action';
      button.textContent = keyword;
      button.addEventListener('click', () => {
        void this.sendTurn(`${keyword} ${this.input.value}`.trim());
      });
      form.appendChild(button);
      this.controls.push(button);
    }

    this.input = document.createElement('input');
    this.input.type = 'text';
    this.input.className = 'turn-input';
    this.input.placeholder = 'ask about the graph, or pick an action';
    form.appendChild(this.input);

    const send = document.createElement('button');
    send.type = 'submit';
    send.className = 'send-btn';
    send.textContent = 'send';
    form.appendChild(send);
    this.controls.push(send);

    this.root.appendChild(form);
  }

  // Reuse the session in the URL hash so a refresh replays the log;
  // otherwise create a fresh session and record it in the hash.
  private async resolveSession(): Promise<void> {
    const fromHash = readSessionFromHash(window.location.hash);
    if (fromHash) {
      try {
        const records = await this.client.fetchLog(fromHash);
        this.sessionId = fromHash;
        this.header.textContent = `session ${this.sessionId}`;
        for (const record of records) {
          if (record.kind === 'turn') {
            this.appendTurn(record.user_input, {
              answer_text: record.answer_text,
              evidence: record.evidence,
              agent_trace: record.agent_trace,
            });
          } else {
            this.appendErrorNote(record.code, record.message, record.trace_id);
          }
        }
        return;
      } catch (err) {
        if (!(err instanceof ApiError && err.status === 404)) throw err;
        // stale hash: fall through and start a new session
      }
    }
    this.sessionId = await this.client.createSession();
    window.location.hash = `s=${this.sessionId}`;
    this.header.textContent = `session ${this.sessionId}`;
  }

  async sendTurn(text: string): Promise<void> {
    const trimmed = text.trim();
    if (trimmed.length === 0 || this.inFlight) return;

    this.setBusy(true);
    this.hideBanner();
    try {
      if (this.sessionId === '') await this.resolveSession();
      const response = await this.client.sendMessage(this.sessionId, trimmed);
      this.appendTurn(trimmed, response);
      this.input.value = '';
    } catch (err) {
      this.handleTurnError(err);
    } finally {
      this.setBusy(false);
    }
  }

  private appendTurn(
    userText: string,
    response: Parameters<typeof renderTurn>[1]['response'],
  ): void {
    renderTurn(
      this.transcript,
      { userText, response },
      { onPrediction: (ev, slot) => void this.loadExplanation(ev, slot) },
    );
  }

  private async loadExplanation(
    evidence: PredictionEvidence,
    slot: HTMLElement,
  ): Promise<void> {
    try {
      const payload = await this.client.fetchExplanation(evidence.prediction_id);
      renderExplanation(slot, payload);
    } catch (err) {
      const panel = document.createElement('div');
      panel.className = 'error-panel';
      panel.textContent =
        err instanceof ApiError
          ? `${err.code}: ${err.message}`
          : String(err);
      slot.appendChild(panel);
    }
  }

  private handleTurnError(err: unknown): void {
    if (err instanceof ApiError && err.code === 'backend_unavailable') {
      this.banner.textContent = `backend_unavailable: ${err.message}`;
      this.banner.hidden = false;
      return;
    }
    if (err instanceof ApiError) {
      this.appendErrorNote(err.code, err.message, err.traceId);
      return;
    }
    this.appendErrorNote('internal', String(err), '');
  }

  private appendErrorNote(code: string, message: string, traceId: string): void {
    const note = document.createElement('div');
    note.className = 'turn-error';
    note.textContent = traceId
      ? `[${code}] ${message} (trace ${traceId})`
      : `[${code}] ${message}`;
    this.transcript.appendChild(note);
  }

  private setBusy(busy: boolean): void {
    this.inFlight = busy;
    this.input.disabled = busy;
    for (const control of this.controls) control.disabled = busy;
  }

  private hideBanner(): void {
    this.banner.hidden = true;
    this.banner.textContent = '';
  }
}
