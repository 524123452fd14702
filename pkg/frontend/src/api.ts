import type {
  AgentResponse,
  ExplanationPayload,
  LogRecord,
  ServiceErrorBody,
} from './types.js';

/**
 * Error raised for any failed API call. `code` matches the service's
 * ServiceError codes; a fetch-level failure (server unreachable) maps
 * to `backend_unavailable` with status 0.
 */
export class ApiError extends Error {
  code: string;
  traceId: string;
  status: number;

  constructor(code: string, message: string, traceId = '', status = 0) {
    super(message);
    this.name = 'ApiError';
    this.code = code;
    this.traceId = traceId;
    this.status = status;
  }
}

// The surface the page depends on; tests substitute their own stub.
export interface SessionApi {
  createSession(): Promise<string>;
  sendMessage(sessionId: string, text: string): Promise<AgentResponse>;
  fetchLog(sessionId: string): Promise<LogRecord[]>;
  fetchExplanation(predictionId: string): Promise<ExplanationPayload>;
  health(): Promise<boolean>;
}

export class ApiClient implements SessionApi {
  constructor(private base = '') {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let res: Response;
    try {
      res = await fetch(this.base + path, init);
    } catch {
      throw new ApiError('backend_unavailable', 'cannot reach the session service');
    }
    if (!res.ok) {
      let body: ServiceErrorBody | null = null;
      try {
        body = await res.json();
      } catch {
        // non-JSON error page, fall through to the generic mapping
      }
      if (body && typeof body.code === 'string') {
        throw new ApiError(body.code, body.message, body.trace_id, res.status);
      }
      throw new ApiError(
        res.status >= 500 ? 'internal' : 'bad_request',
        `HTTP ${res.status}`,
        '',
        res.status,
      );
    }
    return res;
  }

  async createSession(): Promise<string> {
    const res = await this.request('/api/sessions', { method: 'POST' });
    const body = await res.json();
    return body.session_id as string;
  }

  async sendMessage(sessionId: string, text: string): Promise<AgentResponse> {
    const res = await this.request(
      `/api/sessions/${encodeURIComponent(sessionId)}/message`,
      {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ text }),
      },
    );
    return res.json();
  }

  async fetchLog(sessionId: string): Promise<LogRecord[]> {
    const res = await this.request(
      `/api/sessions/${encodeURIComponent(sessionId)}/log`,
    );
    const text = await res.text();
    return text
      .split('\n')
      .filter((line) => line.length > 0)
      .map((line) => JSON.parse(line) as LogRecord);
  }

  async fetchExplanation(predictionId: string): Promise<ExplanationPayload> {
    const res = await this.request(
      `/api/predictions/${encodeURIComponent(predictionId)}/explanation`,
    );
    return res.json();
  }

  async health(): Promise<boolean> {
    try {
      const res = await this.request('/api/health');
      const body = await res.json();
      return body.status === 'ok';
    } catch {
      return false;
    }
  }
}
