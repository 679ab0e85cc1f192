// Typed client for the chat backend. Every outbound body is validated
// against the server's JSON schema before the request is sent.

export interface PersonaJson {
  gender: string;
  location: string;
  tags: string[];
}

export interface SessionInfo {
  session_id: string;
  persona: PersonaJson;
}

export interface ChatResponse {
  response: string;
  alpha_used: number;
  alpha_source: 'predicted' | 'fixed';
  history_len: number;
}

export interface TranscriptEntry {
  role: 'user' | 'agent';
  text: string;
  alpha_used?: number;
}

export interface SessionTranscript {
  session_id: string;
  persona: PersonaJson;
  transcript: TranscriptEntry[];
}

export type AlphaParam = number | 'auto';

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export const GENDERS = ['female', 'male', 'unspecified'] as const;

export function validateAlphaParam(alpha: AlphaParam): void {
  if (alpha === 'auto') return;
  if (typeof alpha !== 'number' || Number.isNaN(alpha) || alpha < 0 || alpha > 1) {
    throw new ApiError(0, `alpha must be "auto" or a number in [0, 1], got ${alpha}`);
  }
}

export function validatePersona(p: PersonaJson): void {
  if (!GENDERS.includes(p.gender as (typeof GENDERS)[number])) {
    throw new ApiError(0, `invalid gender ${p.gender}`);
  }
  if (typeof p.location !== 'string' || p.location.length === 0) {
    throw new ApiError(0, 'location must be a non-empty string');
  }
  if (!Array.isArray(p.tags) || p.tags.some((t) => typeof t !== 'string' || t.length === 0)) {
    throw new ApiError(0, 'tags must be a list of non-empty strings');
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ChatApi {
  constructor(
    public readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}${path}`, {
        method,
        headers: { 'Content-Type': 'application/json' },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new ApiError(0, `network error: ${String(err)}`);
    }
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new ApiError(resp.status, (payload as { error?: string }).error ?? resp.statusText);
    }
    return payload as T;
  }

  health(): Promise<{ status: string; model: string }> {
    return this.request('GET', '/healthz');
  }

  createSession(persona?: PersonaJson): Promise<SessionInfo> {
    if (persona !== undefined) validatePersona(persona);
    return this.request('POST', '/api/session', persona ? { persona } : {});
  }

  chat(sessionId: string, message: string, alpha: AlphaParam): Promise<ChatResponse> {
    if (!sessionId) throw new ApiError(0, 'no active session');
    if (!message) throw new ApiError(0, 'message must be non-empty');
    validateAlphaParam(alpha);
    return this.request('POST', '/api/chat', { session_id: sessionId, message, alpha });
  }

  setPersona(sessionId: string, persona: PersonaJson): Promise<{ persona: PersonaJson }> {
    validatePersona(persona);
    return this.request('PUT', `/api/session/${sessionId}/persona`, { persona });
  }

  getSession(sessionId: string): Promise<SessionTranscript> {
    return this.request('GET', `/api/session/${sessionId}`);
  }
}
